//! Deterministic reformulation of the expected running cost.

use serde::{Deserialize, Serialize};

use crate::demand::OuProcess;
use crate::error::{invalid, Error, Result};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    #[serde(default)]
    pub w_det: f64,
    #[serde(default)]
    pub w_track: f64,
    #[serde(default)]
    pub w_under: f64,
    #[serde(default)]
    pub w_ex: f64,
    #[serde(default = "default_c_compr")]
    pub c_compr: f64,
    #[serde(default = "default_c_gas")]
    pub c_gas: f64,
}

fn default_c_compr() -> f64 {
    1.0
}

fn default_c_gas() -> f64 {
    1e-4
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_det: 0.0,
            w_track: 0.0,
            w_under: 0.0,
            w_ex: 0.0,
            c_compr: default_c_compr(),
            c_gas: default_c_gas(),
        }
    }
}

impl CostWeights {
    pub fn tracking() -> Self {
        CostWeights {
            w_track: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_det, self.w_track, self.w_under, self.w_ex, self.c_compr, self.c_gas];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!("cost weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncNormSpec {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean of `N(mean, variance)` conditioned on `[lower, upper]`.
pub fn truncnorm_mean(spec: TruncNormSpec) -> Result<f64> {
    if !(spec.variance > 0.0) || !(spec.lower < spec.upper) {
        return Err(invalid(format!("bad truncation spec {spec:?}")));
    }
    let sd = spec.variance.sqrt();
    let alpha = (spec.lower - spec.mean) / sd;
    let beta = (spec.upper - spec.mean) / sd;
    // evaluate the mass on the side with the better-conditioned tail
    let mass = if alpha > 0.0 {
        normal::sf(alpha) - normal::sf(beta)
    } else {
        normal::cdf(beta) - normal::cdf(alpha)
    };
    if !(mass > 1e-300) {
        return Err(Error::DegenerateTruncation {
            lower: spec.lower,
            upper: spec.upper,
        });
    }
    let phi = |x: f64| if x.is_finite() { normal::pdf(x) } else { 0.0 };
    Ok(spec.mean + sd * (phi(alpha) - phi(beta)) / mass)
}

/// Mean and variance of the demand at one instant.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Moments {
    pub mean: f64,
    pub var: f64,
    y0: f64,
}

impl Moments {
    pub(crate) fn of(p: &OuProcess, t: f64) -> Result<Self> {
        Ok(Moments {
            mean: p.mean(t)?,
            var: p.variance(t)?,
            y0: p.y0,
        })
    }

    fn tracking(&self, supply: f64) -> f64 {
        (supply - self.mean).powi(2) + self.var
    }

    fn undersupply(&self, supply: f64) -> f64 {
        if self.var <= 0.0 {
            return (supply - self.y0).min(0.0);
        }
        let sd = self.var.sqrt();
        let z = (supply - self.mean) / sd;
        // S(1 − Φ) − E[Y | Y > S](1 − Φ), with E[Y | Y > S] = m + sd·φ(z)/(1 − Φ(z))
        (supply - self.mean) * normal::sf(z) - sd * normal::pdf(z)
    }

    fn excess(&self, supply: f64) -> f64 {
        if self.var <= 0.0 {
            return (supply - self.y0).max(0.0);
        }
        let sd = self.var.sqrt();
        let z = (supply - self.mean) / sd;
        (supply - self.mean) * normal::cdf(z) + sd * normal::pdf(z)
    }

    /// First derivatives of tracking, undersupply and excess in the supply.
    pub(crate) fn sensitivities(&self, supply: f64) -> (f64, f64, f64) {
        let track = 2.0 * (supply - self.mean);
        if self.var <= 0.0 {
            let below = if supply < self.y0 { 1.0 } else { 0.0 };
            return (track, below, 1.0 - below);
        }
        let z = (supply - self.mean) / self.var.sqrt();
        (track, normal::sf(z), normal::cdf(z))
    }

    pub(crate) fn running_cost(&self, weights: &CostWeights, supply: f64, inflow: f64, compressor: f64) -> CostBreakdown {
        let control = weights.w_det * (weights.c_compr * compressor.max(0.0) + weights.c_gas * inflow);
        let tracking = if weights.w_track > 0.0 {
            weights.w_track * self.tracking(supply)
        } else {
            0.0
        };
        let undersupply = if weights.w_under > 0.0 {
            -weights.w_under * self.undersupply(supply)
        } else {
            0.0
        };
        let excess = if weights.w_ex > 0.0 {
            weights.w_ex * self.excess(supply)
        } else {
            0.0
        };
        CostBreakdown {
            control,
            tracking,
            undersupply,
            excess,
            ..Default::default()
        }
        .finish()
    }
}

/// `E[(S − Y_t)²]`.
pub fn tracking_cost(p: &OuProcess, t: f64, supply: f64) -> Result<f64> {
    Ok(Moments::of(p, t)?.tracking(supply))
}

/// `E[min(S − Y_t, 0)]`, always `≤ 0`.
pub fn undersupply_cost(p: &OuProcess, t: f64, supply: f64) -> Result<f64> {
    Ok(Moments::of(p, t)?.undersupply(supply))
}

/// `E[max(S − Y_t, 0)]`, always `≥ 0`.
pub fn excess_revenue(p: &OuProcess, t: f64, supply: f64) -> Result<f64> {
    Ok(Moments::of(p, t)?.excess(supply))
}

/// One evaluation of the running cost and its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// Control cost `C1` (gas use and compressor lift).
    pub control: f64,
    /// `C2`, expected squared tracking error.
    pub tracking: f64,
    /// `C3`, expected shortfall entering with a minus sign.
    pub undersupply: f64,
    /// `R`, expected excess.
    pub excess: f64,
    pub regularization: f64,
    pub penalty: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub(crate) fn finish(mut self) -> Self {
        self.total = self.control + self.tracking + self.undersupply - self.excess
            + self.regularization
            + self.penalty;
        self
    }
}

/// Running cost rate at one instant, weighted.
pub fn running_cost(
    p: &OuProcess,
    weights: &CostWeights,
    t: f64,
    supply: f64,
    inflow: f64,
    compressor: f64,
) -> Result<CostBreakdown> {
    Ok(Moments::of(p, t)?.running_cost(weights, supply, inflow, compressor))
}

/// Composite trapezoid weights for the grid points lying in `[t_star, T]`.
///
/// Returns one weight per grid point (zero outside the window). Grid points
/// within `1e-9·dt` of `t_star` count as inside.
pub fn trapezoid_weights(times: &[f64], t_star: f64) -> Result<Vec<f64>> {
    let last = *times.last().ok_or_else(|| invalid("empty time grid"))?;
    let slack = if times.len() > 1 { 1e-9 * (times[1] - times[0]) } else { 0.0 };
    let first = times.iter().position(|&t| t >= t_star - slack);
    let first = match first {
        Some(i) if i + 1 < times.len() => i,
        _ => {
            return Err(Error::EmptyHorizon {
                t_star,
                horizon: last,
            })
        }
    };
    let mut w = vec![0.0; times.len()];
    for i in first..times.len() - 1 {
        let h = 0.5 * (times[i + 1] - times[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::MeanLevel;

    fn tele() -> OuProcess {
        OuProcess::new(0.0, 1.0, 3.0, 0.2, MeanLevel::sinusoidal(1.0, 1.0, std::f64::consts::PI, 0.0))
            .unwrap()
    }

    #[test]
    fn truncnorm_cases() {
        let inf = f64::INFINITY;
        let full = TruncNormSpec { mean: 0.3, variance: 2.0, lower: -inf, upper: inf };
        assert!((truncnorm_mean(full).unwrap() - 0.3).abs() < 1e-15);
        let sym = TruncNormSpec { mean: 0.3, variance: 2.0, lower: -0.7, upper: 1.3 };
        assert!((truncnorm_mean(sym).unwrap() - 0.3).abs() < 1e-14);
        let half = TruncNormSpec { mean: 0.0, variance: 1.0, lower: 0.0, upper: inf };
        assert!((truncnorm_mean(half).unwrap() - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        let far = TruncNormSpec { mean: 0.0, variance: 1.0, lower: 40.0, upper: 41.0 };
        assert!(matches!(truncnorm_mean(far), Err(Error::DegenerateTruncation { .. })));
    }

    #[test]
    fn truncnorm_tail_window_is_accurate() {
        // deep in the upper tail the conditional mean approaches the lower point
        let spec = TruncNormSpec { mean: 0.0, variance: 1.0, lower: 8.0, upper: f64::INFINITY };
        let m = truncnorm_mean(spec).unwrap();
        assert!(m > 8.0 && m < 8.0 + 1.0 / 8.0);
    }

    #[test]
    fn tracking_is_centered_parabola() {
        let p = tele();
        let t = 1.3;
        let m = p.mean(t).unwrap();
        let v = p.variance(t).unwrap();
        assert!((tracking_cost(&p, t, m).unwrap() - v).abs() < 1e-15);
        assert!((tracking_cost(&p, t, m + 0.5).unwrap() - v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn undersupply_at_the_mean_is_half_normal() {
        let p = tele();
        let t = 2.0;
        let m = p.mean(t).unwrap();
        let v = p.variance(t).unwrap();
        let expect = -(v / (2.0 * std::f64::consts::PI)).sqrt();
        assert!((undersupply_cost(&p, t, m).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn undersupply_matches_truncated_normal_form() {
        let p = tele();
        let t = 0.8;
        let m = p.mean(t).unwrap();
        let v = p.variance(t).unwrap();
        for &s in &[m - 0.3, m, m + 0.1] {
            let above = normal::sf((s - m) / v.sqrt());
            let cond = truncnorm_mean(TruncNormSpec { mean: m, variance: v, lower: s, upper: f64::INFINITY }).unwrap();
            let direct = s * above - cond * above;
            assert!((undersupply_cost(&p, t, s).unwrap() - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn tails_vanish() {
        let p = tele();
        let t = 3.0;
        let m = p.mean(t).unwrap();
        let sd = p.variance(t).unwrap().sqrt();
        assert!(undersupply_cost(&p, t, m + 10.0 * sd).unwrap().abs() < 1e-12);
        assert!(excess_revenue(&p, t, m - 10.0 * sd).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_start() {
        let p = tele();
        assert_eq!(undersupply_cost(&p, 0.0, 0.4).unwrap(), -0.6);
        assert_eq!(undersupply_cost(&p, 0.0, 1.4).unwrap(), 0.0);
        assert!((excess_revenue(&p, 0.0, 1.4).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let p = tele();
        for &(t, s) in &[(0.5, 1.2), (2.2, 0.3), (3.7, 2.0)] {
            let (dt, du, de) = Moments::of(&p, t).unwrap().sensitivities(s);
            let h = 1e-6;
            let fd = |f: &dyn Fn(f64) -> f64| (f(s + h) - f(s - h)) / (2.0 * h);
            assert!((dt - fd(&|x| tracking_cost(&p, t, x).unwrap())).abs() < 1e-7);
            assert!((du - fd(&|x| undersupply_cost(&p, t, x).unwrap())).abs() < 1e-7);
            assert!((de - fd(&|x| excess_revenue(&p, t, x).unwrap())).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_weights_give_zero_cost() {
        let p = tele();
        let w = CostWeights { c_compr: 0.0, c_gas: 0.0, ..Default::default() };
        let c = running_cost(&p, &w, 1.0, 3.0, 2.0, 1.0).unwrap();
        assert_eq!(c.total, 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = CostWeights { w_ex: -1.0, ..Default::default() };
        assert!(w.validate().is_err());
    }

    #[test]
    fn trapezoid_window() {
        let times: Vec<f64> = (0..=4).map(|k| k as f64 * 0.5).collect();
        assert_eq!(trapezoid_weights(&times, 0.0).unwrap(), vec![0.25, 0.5, 0.5, 0.5, 0.25]);
        assert_eq!(trapezoid_weights(&times, 1.0).unwrap(), vec![0.0, 0.0, 0.25, 0.5, 0.25]);
        assert!(matches!(trapezoid_weights(&times, 2.0), Err(Error::EmptyHorizon { .. })));
    }
}
