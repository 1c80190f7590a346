//! Closed-form oracles for the single-edge advection problem and the Monte
//! Carlo hit/save path analysis of a supply curve.

use rayon::prelude::*;
use serde::Serialize;

use crate::control::Channel;
use crate::demand::{path_rng, OuProcess};
use crate::error::{domain, Result};
use crate::network::{CouplingSpec, EdgeModel, Network, Trajectory};
use crate::optimizer::{ChanceConstraintSpec, ConstraintKind};

/// Exact solution of `ρ_t + λρ_x = sρ` on `x ≥ 0` with initial data `ρ0`
/// and inflow `u`. Points on the characteristic `t = x/λ` take the
/// initial-data branch.
pub fn exact_advection(
    x: f64,
    t: f64,
    speed: f64,
    source: f64,
    rho0: impl Fn(f64) -> f64,
    inflow: impl Fn(f64) -> f64,
) -> f64 {
    if t <= x / speed {
        (source * t).exp() * rho0(x - speed * t)
    } else {
        (source * x / speed).exp() * inflow(t - x / speed)
    }
}

/// Pointwise optimal inflow for pure tracking on a single advection edge of
/// length `length`: the outflow must equal the mean demand, or the
/// `(1 − θ)`-quantile where a single chance constraint is active. Defined for
/// `t ≤ T − length/λ`; later times are dropped.
pub fn analytic_optimal_control(
    p: &OuProcess,
    speed: f64,
    source: f64,
    length: f64,
    constraint: &ChanceConstraintSpec,
    t_end: f64,
    times: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if !(speed > 0.0 && length > 0.0) {
        return Err(domain("speed and length must be positive"));
    }
    let delay = length / speed;
    if t_end <= p.t0 + delay {
        return Err(domain(format!("horizon {t_end} ends before the first arrival")));
    }
    let gain = (-source * delay).exp();
    times
        .iter()
        .filter(|&&t| t + delay <= t_end + 1e-12)
        .map(|&t| {
            let arrive = t + delay;
            let active = constraint.kind == ConstraintKind::Scc
                && arrive >= constraint.t_lo - 1e-12
                && arrive <= constraint.t_hi + 1e-12;
            let target = if active {
                p.quantile(arrive, constraint.theta)?
            } else {
                p.mean(arrive)?
            };
            Ok((t, gain * target))
        })
        .collect()
}

/// `sqrt(Σ w_i (a_i − b_i)²)`.
pub fn weighted_l2(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Largest violation of the vertex conditions at each level, recomputed from
/// the stored states: equal potentials (or the prescribed compressor lift)
/// and the flow balance including any withdrawal.
pub fn coupling_residuals(net: &Network, traj: &Trajectory) -> Vec<f64> {
    let lay = &traj.layout;
    let couplings: Vec<(Vec<_>, CouplingSpec)> = net
        .vertices()
        .into_iter()
        .filter_map(|v| net.couplings.get(&v).map(|c| (net.traces(&v), *c)))
        .collect();
    traj.states
        .iter()
        .zip(&traj.controls)
        .map(|(q, u)| {
            let mut worst: f64 = 0.0;
            for (traces, spec) in &couplings {
                let mut balance = 0.0;
                let mut potentials = Vec::with_capacity(traces.len());
                for tr in traces {
                    let node = lay.node(q, tr.edge, tr.node);
                    let model = &net.edges[tr.edge].model;
                    let (pot, flow) = match *model {
                        EdgeModel::Advection { speed, .. } => (f64::NAN, speed * node[0]),
                        EdgeModel::Euler { .. } => (model.pressure(node[0]) / net.pressure_unit, node[1]),
                        EdgeModel::Telegrapher { .. } => (node[0], node[1]),
                    };
                    potentials.push(pot);
                    balance += if tr.incoming { flow } else { -flow };
                }
                if let CouplingSpec::Withdrawal { scale } = spec {
                    balance -= scale * u[Channel::Inflow.index()];
                }
                worst = worst.max(balance.abs());
                if potentials[0].is_nan() {
                    continue;
                }
                let lift = match spec {
                    CouplingSpec::Compressor => u[Channel::Compressor.index()],
                    _ => 0.0,
                };
                for p in &potentials[1..] {
                    worst = worst.max((p - potentials[0] - lift).abs());
                }
            }
            worst
        })
        .collect()
}

/// Hit/save classification of sampled demand paths against a supply curve.
#[derive(Debug, Clone, Serialize)]
pub struct McAnalysis {
    pub times: Vec<f64>,
    pub supply: Vec<f64>,
    pub n_paths: usize,
    pub hit: Vec<usize>,
    pub save: Vec<usize>,
    /// Maximum over all paths at each grid point.
    pub r: Vec<f64>,
    /// Maximum over paths still in the save set; `None` if that set is empty.
    pub r_save: Vec<Option<f64>>,
    pub d_save: Vec<Option<f64>>,
    /// `(path, time)` of every first passage.
    pub first_passage: Vec<(usize, f64)>,
}

impl McAnalysis {
    pub fn hit_fraction(&self, j: usize) -> f64 {
        self.hit[j] as f64 / self.n_paths as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,S,hit,save,hit_fraction,r,r_save,d_save")?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for j in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.times[j],
                self.supply[j],
                self.hit[j],
                self.save[j],
                self.hit_fraction(j),
                self.r[j],
                opt(self.r_save[j]),
                opt(self.d_save[j])
            )?;
        }
        Ok(())
    }

    pub fn write_first_passage_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path,t")?;
        for (i, t) in &self.first_passage {
            writeln!(w, "{i},{t}")?;
        }
        Ok(())
    }
}

struct Acc {
    save: Vec<usize>,
    r: Vec<f64>,
    r_save: Vec<f64>,
    first: Vec<(usize, usize)>,
}

impl Acc {
    fn new(n: usize) -> Self {
        Acc {
            save: vec![0; n],
            r: vec![f64::NEG_INFINITY; n],
            r_save: vec![f64::NEG_INFINITY; n],
            first: Vec::new(),
        }
    }

    fn merge(mut self, o: Acc) -> Acc {
        for j in 0..self.r.len() {
            self.save[j] += o.save[j];
            self.r[j] = self.r[j].max(o.r[j]);
            self.r_save[j] = self.r_save[j].max(o.r_save[j]);
        }
        self.first.extend(o.first);
        self
    }
}

/// Samples `n_paths` exact demand paths on `times` and classifies them
/// against `supply`. A path is hit from the first grid point where it
/// exceeds the supply on.
pub fn mc_analyze(p: &OuProcess, times: &[f64], supply: &[f64], n_paths: usize, seed: u64) -> Result<McAnalysis> {
    if n_paths == 0 {
        return Err(domain("need at least one path"));
    }
    if times.len() != supply.len() {
        return Err(domain("supply and time grid differ in length"));
    }
    let stepper = p.stepper(times)?;
    let n = times.len();
    let acc = (0..n_paths)
        .into_par_iter()
        .fold(
            || (Acc::new(n), vec![0.0; n]),
            |(mut acc, mut row), i| {
                let mut rng = path_rng(seed, i);
                stepper.fill(&mut rng, &mut row);
                let mut alive = true;
                for j in 0..n {
                    let y = row[j];
                    acc.r[j] = acc.r[j].max(y);
                    if alive && y > supply[j] {
                        alive = false;
                        acc.first.push((i, j));
                    }
                    if alive {
                        acc.save[j] += 1;
                        acc.r_save[j] = acc.r_save[j].max(y);
                    }
                }
                (acc, row)
            },
        )
        .map(|(acc, _)| acc)
        .reduce(|| Acc::new(n), Acc::merge);
    let mut first = acc.first;
    first.sort_unstable();
    let r_save: Vec<Option<f64>> = (0..n).map(|j| (acc.save[j] > 0).then_some(acc.r_save[j])).collect();
    Ok(McAnalysis {
        times: times.to_vec(),
        supply: supply.to_vec(),
        n_paths,
        hit: acc.save.iter().map(|s| n_paths - s).collect(),
        save: acc.save,
        r: acc.r,
        d_save: r_save.iter().zip(supply).map(|(r, s)| r.map(|r| s - r)).collect(),
        r_save,
        first_passage: first.into_iter().map(|(i, j)| (i, times[j])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::MeanLevel;

    #[test]
    fn exact_advection_branches() {
        let v = exact_advection(0.4, 0.1, 4.0, -1.0, f64::sin, |t| (10.0 * t).sin());
        assert_eq!(v, 0.0);
        assert_eq!(exact_advection(0.3, 0.0, 4.0, -1.0, f64::sin, |_| 7.0), 0.3f64.sin());
        let v = exact_advection(0.4, 0.5, 4.0, 0.0, |_| 0.0, |t| (10.0 * t).sin());
        assert!((v - 4.0f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn analytic_control_at_median_is_the_shifted_mean() {
        let p = OuProcess::new(0.0, 1.0, 3.0, 0.1, MeanLevel::sinusoidal(1.0, 2.0, 8.0 * std::f64::consts::PI, 0.0))
            .unwrap();
        let spec = ChanceConstraintSpec::scc(0.0, 1.0, 0.5);
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
        let u = analytic_optimal_control(&p, 4.0, 0.0, 1.0, &spec, 1.0, &times).unwrap();
        assert_eq!(u.len(), 16);
        for (t, v) in u {
            assert!((v - p.mean(t + 0.25).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_control_jumps_at_activation() {
        let p = OuProcess::new(0.0, 1.0, 3.0, 0.1, MeanLevel::constant(1.0)).unwrap();
        let spec = ChanceConstraintSpec::scc(0.6, 1.0, 0.05);
        let u = analytic_optimal_control(&p, 4.0, -0.1, 1.0, &spec, 1.0, &[0.3, 0.4]).unwrap();
        let gain = (0.1f64 * 0.25).exp();
        assert!((u[0].1 - gain * p.mean(0.55).unwrap()).abs() < 1e-14);
        assert!((u[1].1 - gain * p.quantile(0.65, 0.05).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn supply_below_start_hits_every_path_at_once() {
        let p = OuProcess::new(0.0, 1.0, 3.0, 0.1, MeanLevel::constant(1.0)).unwrap();
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let a = mc_analyze(&p, &times, &[0.5; 11], 200, 1).unwrap();
        assert!(a.save.iter().all(|&s| s == 0));
        assert!(a.r_save.iter().all(Option::is_none));
        assert!(a.first_passage.iter().all(|&(_, t)| t == 0.0));
    }

    #[test]
    fn unreachable_supply_never_hits() {
        let p = OuProcess::new(0.0, 1.0, 3.0, 0.1, MeanLevel::constant(1.0)).unwrap();
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let s = 1.0 + 50.0 * 0.1 / 6f64.sqrt();
        let a = mc_analyze(&p, &times, &[s; 11], 500, 2).unwrap();
        assert!(a.hit.iter().all(|&h| h == 0));
        assert_eq!(a.r_save.iter().map(|r| r.unwrap()).collect::<Vec<_>>(), a.r);
    }
}
