//! Piecewise-constant controls on a coarse time grid.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Inflow `u`, or the withdrawal for gas-to-power networks.
    Inflow,
    /// Compressor pressure lift `u_compr`.
    Compressor,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Inflow, Channel::Compressor];

    pub fn index(self) -> usize {
        match self {
            Channel::Inflow => 0,
            Channel::Compressor => 1,
        }
    }
}

/// Control values on cells `(t0 + k·W, t0 + (k+1)·W]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub t0: f64,
    pub width: f64,
    pub inflow: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflow_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor_max: Option<f64>,
}

impl ControlGrid {
    /// Cells of width `width` covering `[t0, t_end]`.
    pub fn uniform(t0: f64, t_end: f64, width: f64, inflow: f64, compressor: Option<f64>) -> Result<Self> {
        if !(width > 0.0) || !(t_end > t0) {
            return Err(invalid(format!("bad control grid: width {width}, [{t0}, {t_end}]")));
        }
        let n = ((t_end - t0) / width - 1e-9).ceil().max(1.0) as usize;
        Ok(ControlGrid {
            t0,
            width,
            inflow: vec![inflow; n],
            compressor: compressor.map(|c| vec![c; n]),
            inflow_max: None,
            compressor_max: None,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.inflow.len()
    }

    pub fn has(&self, ch: Channel) -> bool {
        match ch {
            Channel::Inflow => true,
            Channel::Compressor => self.compressor.is_some(),
        }
    }

    pub fn channels(&self) -> Vec<Channel> {
        Channel::ALL.into_iter().filter(|&c| self.has(c)).collect()
    }

    pub fn values(&self, ch: Channel) -> &[f64] {
        match ch {
            Channel::Inflow => &self.inflow,
            Channel::Compressor => self.compressor.as_deref().unwrap_or(&[]),
        }
    }

    pub fn values_mut(&mut self, ch: Channel) -> &mut [f64] {
        match ch {
            Channel::Inflow => &mut self.inflow,
            Channel::Compressor => self.compressor.as_deref_mut().unwrap_or(&mut []),
        }
    }

    pub fn upper(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Inflow => self.inflow_max,
            Channel::Compressor => self.compressor_max,
        }
        .unwrap_or(f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || self.inflow.is_empty() {
            return Err(invalid("control grid needs positive width and at least one cell"));
        }
        if let Some(c) = &self.compressor {
            if c.len() != self.inflow.len() {
                return Err(invalid("control channels must share the same cells"));
            }
        }
        Ok(())
    }

    /// Cell holding time `t`. `t0` itself belongs to the first cell.
    pub fn cell_at(&self, t: f64) -> usize {
        let x = (t - self.t0) / self.width;
        let k = (x - 1e-9).ceil() as isize - 1;
        k.clamp(0, self.n_cells() as isize - 1) as usize
    }

    pub fn value_at(&self, ch: Channel, t: f64) -> f64 {
        if !self.has(ch) {
            return 0.0;
        }
        self.values(ch)[self.cell_at(t)]
    }

    /// Checks that the cell width is an integer multiple of `dt` and the
    /// cells cover `[t0, t_end]`.
    pub fn check_alignment(&self, dt: f64, t_end: f64) -> Result<()> {
        let ratio = self.width / dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(domain(format!(
                "control cell width {} is not a multiple of the time step {dt}",
                self.width
            )));
        }
        if self.t0 + self.n_cells() as f64 * self.width < t_end - 1e-9 * dt {
            return Err(domain("control cells do not cover the horizon"));
        }
        Ok(())
    }

    /// Flattened values, inflow first.
    pub fn flatten(&self) -> Vec<f64> {
        self.channels()
            .into_iter()
            .flat_map(|c| self.values(c).to_vec())
            .collect()
    }

    pub fn set_flat(&mut self, x: &[f64]) {
        let n = self.n_cells();
        for (i, ch) in self.channels().into_iter().enumerate() {
            self.values_mut(ch).copy_from_slice(&x[i * n..(i + 1) * n]);
        }
    }

    /// Upper bound of every flattened entry.
    pub fn flat_upper(&self) -> Vec<f64> {
        self.channels()
            .into_iter()
            .flat_map(|ch| vec![self.upper(ch); self.n_cells()])
            .collect()
    }

    /// Projection onto `0 ≤ u ≤ upper` for every flattened entry.
    pub fn project(&self, x: &mut [f64]) {
        let n = self.n_cells();
        for (i, ch) in self.channels().into_iter().enumerate() {
            let hi = self.upper(ch);
            for v in &mut x[i * n..(i + 1) * n] {
                *v = v.clamp(0.0, hi);
            }
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        match &self.compressor {
            Some(c) => {
                writeln!(w, "t,u,u_compr")?;
                for (k, (u, uc)) in self.inflow.iter().zip(c).enumerate() {
                    writeln!(w, "{},{u},{uc}", self.t0 + k as f64 * self.width)?;
                }
            }
            None => {
                writeln!(w, "t,u")?;
                for (k, u) in self.inflow.iter().enumerate() {
                    writeln!(w, "{},{u}", self.t0 + k as f64 * self.width)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_left_open() {
        let g = ControlGrid::uniform(0.0, 1.0, 0.25, 1.0, None).unwrap();
        assert_eq!(g.n_cells(), 4);
        assert_eq!(g.cell_at(0.0), 0);
        assert_eq!(g.cell_at(0.25), 0);
        assert_eq!(g.cell_at(0.2500001), 1);
        assert_eq!(g.cell_at(1.0), 3);
        assert_eq!(g.cell_at(7.0), 3);
    }

    #[test]
    fn alignment() {
        let g = ControlGrid::uniform(0.0, 12.0, 0.25, 1.0, Some(0.0)).unwrap();
        assert!(g.check_alignment(0.25, 12.0).is_ok());
        assert!(g.check_alignment(0.125, 12.0).is_ok());
        assert!(g.check_alignment(0.1, 12.0).is_err());
        assert!(g.check_alignment(0.25, 13.0).is_err());
    }

    #[test]
    fn flatten_round_trip_and_projection() {
        let mut g = ControlGrid::uniform(0.0, 1.0, 0.5, 1.0, Some(2.0)).unwrap();
        g.compressor_max = Some(1.5);
        let mut x = g.flatten();
        assert_eq!(x, vec![1.0, 1.0, 2.0, 2.0]);
        x[0] = -3.0;
        g.project(&mut x);
        assert_eq!(x, vec![0.0, 1.0, 1.5, 1.5]);
        g.set_flat(&x);
        assert_eq!(g.values(Channel::Compressor), &[1.5, 1.5]);
    }
}
