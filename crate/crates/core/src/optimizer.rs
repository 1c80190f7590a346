//! Discretize-then-optimize solver for the chance-constrained control problem.
//!
//! The objective is the time-discrete reformulated cost on the simulation
//! grid. Its gradient comes from a reverse sweep through the implicit steps.
//! Single chance constraints and pressure bounds are pointwise state
//! constraints handled by an augmented Lagrangian; the joint chance
//! constraint enters as a quadratic penalty on the first-passage risk.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{Channel, ControlGrid};
use crate::cost::{trapezoid_weights, CostBreakdown, CostWeights, Moments};
use crate::demand::OuProcess;
use crate::error::{domain, invalid, Error, Result};
use crate::fptd::{solve_volterra, Boundary};
use crate::network::{
    adjoint_sensitivities, level_controls, simulate, supply_index, EdgeModel, InitialData, Network,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    None,
    Scc,
    Jcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConstraintSpec {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub t_lo: f64,
    #[serde(default)]
    pub t_hi: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Step of the first-passage grid (joint constraint only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fptd_dt: Option<f64>,
}

fn default_theta() -> f64 {
    0.05
}

impl ChanceConstraintSpec {
    pub fn none() -> Self {
        ChanceConstraintSpec {
            kind: ConstraintKind::None,
            t_lo: 0.0,
            t_hi: 0.0,
            theta: default_theta(),
            fptd_dt: None,
        }
    }

    pub fn scc(t_lo: f64, t_hi: f64, theta: f64) -> Self {
        ChanceConstraintSpec {
            kind: ConstraintKind::Scc,
            t_lo,
            t_hi,
            theta,
            fptd_dt: None,
        }
    }

    pub fn jcc(t_lo: f64, t_hi: f64, theta: f64, fptd_dt: f64) -> Self {
        ChanceConstraintSpec {
            kind: ConstraintKind::Jcc,
            t_lo,
            t_hi,
            theta,
            fptd_dt: Some(fptd_dt),
        }
    }

    pub fn validate(&self, t0: f64, t_end: f64) -> Result<()> {
        if self.kind == ConstraintKind::None {
            return Ok(());
        }
        if !(t0 <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= t_end + 1e-12) {
            return Err(invalid(format!(
                "chance constraint interval [{}, {}] must lie in [{t0}, {t_end}]",
                self.t_lo, self.t_hi
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(invalid(format!("risk level must lie in (0, 1), got {}", self.theta)));
        }
        if self.kind == ConstraintKind::Jcc {
            if (self.t_lo - t0).abs() > 1e-12 * (1.0 + t0.abs()) {
                return Err(invalid("joint chance constraints must start at t0"));
            }
            match self.fptd_dt {
                Some(dt) if dt > 0.0 => {}
                _ => return Err(invalid("joint chance constraint needs a positive fptd_dt")),
            }
        }
        Ok(())
    }
}

/// Lower bound on a gas vertex pressure, in units of `pressure_unit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureBound {
    pub vertex: String,
    pub min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    pub outer_rounds: usize,
    /// Feasibility tolerance for pointwise constraints.
    pub feas_tol: f64,
    /// Initial augmented-Lagrangian penalty.
    pub penalty: f64,
    /// Initial joint-constraint penalty `ρ_J`.
    pub jcc_penalty: f64,
    /// Accepted excess of the first-passage risk over `θ`.
    pub jcc_tol: f64,
    /// Weight of `Σ (Δu)²`.
    pub regularization: f64,
    /// An inner solve stalls when ten iterations lower the cost by less
    /// than `stall_tol·(1 + |cost|)`.
    pub stall_tol: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iter: 500,
            grad_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 40,
            outer_rounds: 20,
            feas_tol: 1e-6,
            penalty: 10.0,
            jcc_penalty: 1e3,
            jcc_tol: 1e-4,
            regularization: 1e-5,
            stall_tol: 1e-7,
        }
    }
}

/// Everything needed to evaluate and optimize one control problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub network: Network,
    pub initial: InitialData,
    pub demand: OuProcess,
    pub weights: CostWeights,
    pub constraint: ChanceConstraintSpec,
    pub pressure_bound: Option<PressureBound>,
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    /// Start of the cost window.
    pub t_star: f64,
    /// Initial iterate, also carrying the cell layout and bounds.
    pub controls: ControlGrid,
    pub settings: OptimizerSettings,
}

/// Pointwise constraint `g_n ≤ 0` at level `n`, with its multiplier.
#[derive(Debug, Clone, Copy)]
struct Pointwise {
    level: usize,
    bound: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Multipliers {
    scc: Vec<f64>,
    pressure: Vec<f64>,
    penalty: f64,
    jcc_penalty: f64,
}

impl Multipliers {
    pub fn scc_mut(&mut self) -> &mut [f64] {
        &mut self.scc
    }

    pub fn pressure_mut(&mut self) -> &mut [f64] {
        &mut self.pressure
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: CostBreakdown,
    /// Gradient over the flattened controls (inflow cells, then compressor).
    pub gradient: Vec<f64>,
    /// Supply on the simulation grid.
    pub supply: Vec<f64>,
    /// Vertex pressure in bound units, when a pressure bound is set.
    pub pressure: Option<Vec<f64>>,
    /// Full simulation; `None` when the supply came from a [`SupplyMap`].
    pub trajectory: Option<Trajectory>,
    pub scc_violation: f64,
    pub pressure_violation: f64,
    pub jcc_risk: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Outer augmented-Lagrangian round; the cost is monotone within a round.
    pub round: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub scc_viol: f64,
    pub jcc_risk: f64,
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub controls: ControlGrid,
    pub objective: CostBreakdown,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub reason: String,
    pub trajectory: Trajectory,
    pub max_violation: f64,
    pub jcc_risk: Option<f64>,
}

impl OptResult {
    pub fn write_trace_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,cost,grad_norm,scc_viol,jcc_risk")?;
        for r in &self.trace {
            writeln!(w, "{},{},{},{},{}", r.iter, r.cost, r.grad_norm, r.scc_viol, r.jcc_risk)?;
        }
        Ok(())
    }
}

/// Pointwise lower bound on the supply from a single chance constraint:
/// the `(1 − θ)`-quantile inside `[t_lo, t_hi]`, `None` outside.
pub fn scc_bound(p: &OuProcess, spec: &ChanceConstraintSpec, times: &[f64]) -> Result<Vec<Option<f64>>> {
    if spec.kind != ConstraintKind::Scc {
        return Err(domain("scc_bound needs a single chance constraint"));
    }
    times
        .iter()
        .map(|&t| {
            if t >= spec.t_lo - 1e-12 && t <= spec.t_hi + 1e-12 {
                p.quantile(t, spec.theta).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

impl Problem {
    /// Validates the problem and replaces a steady initial condition by the
    /// explicit state, so that repeated simulations do not redo it.
    pub fn prepare(mut self) -> Result<Self> {
        self.network.validate()?;
        self.demand.validate()?;
        self.weights.validate()?;
        self.controls.validate()?;
        self.constraint.validate(self.t0, self.t_end)?;
        self.controls.check_alignment(self.dt, self.t_end)?;
        if (self.controls.t0 - self.t0).abs() > 1e-12 * (1.0 + self.t0.abs()) {
            return Err(invalid("control grid must start at t0"));
        }
        if (self.demand.t0 - self.t0).abs() > 1e-12 * (1.0 + self.t0.abs()) {
            return Err(invalid("demand process must start at t0"));
        }
        for ch in self.network.channels() {
            if !self.controls.has(ch) {
                return Err(invalid(format!("network needs the {ch:?} control channel")));
            }
        }
        if let Some(pb) = &self.pressure_bound {
            if !self.network.is_gas() || !self.network.vertices().contains(&pb.vertex) {
                return Err(invalid(format!("pressure bound vertex `{}` is not a gas vertex", pb.vertex)));
            }
        }
        if self.t_star >= self.t_end {
            return Err(Error::EmptyHorizon {
                t_star: self.t_star,
                horizon: self.t_end,
            });
        }
        if matches!(self.initial, InitialData::Steady { .. }) {
            let u0 = level_controls(&self.controls, self.t0);
            let q = self.initial.state(&self.network, u0)?;
            self.initial = InitialData::State(q);
        }
        Ok(self)
    }

    pub fn simulate(&self, controls: &ControlGrid) -> Result<Trajectory> {
        simulate(&self.network, &self.initial, controls, self.t0, self.t_end, self.dt)
    }

    fn times(&self) -> Vec<f64> {
        let n = ((self.t_end - self.t0) / self.dt).round() as usize;
        (0..=n).map(|k| self.t0 + k as f64 * self.dt).collect()
    }

    /// First level whose supply the controls can influence within the
    /// constraint window.
    fn controllable(&self, t: f64) -> bool {
        let slack = 1e-9 * self.dt;
        if self.network.is_gas() {
            return true;
        }
        t > self.t_star + slack || (self.t_star <= self.t0 + slack && t > self.t0 + slack)
    }

    fn scc_constraints(&self) -> Result<Vec<Pointwise>> {
        if self.constraint.kind != ConstraintKind::Scc {
            return Ok(Vec::new());
        }
        let times = self.times();
        let bounds = scc_bound(&self.demand, &self.constraint, &times)?;
        Ok(times
            .iter()
            .zip(bounds)
            .enumerate()
            .filter_map(|(n, (&t, b))| b.filter(|_| self.controllable(t)).map(|bound| Pointwise { level: n, bound }))
            .collect())
    }

    fn pressure_levels(&self) -> Vec<Pointwise> {
        match &self.pressure_bound {
            Some(pb) => (1..self.times().len())
                .map(|n| Pointwise {
                    level: n,
                    bound: pb.min,
                })
                .collect(),
            None => Vec::new(),
        }
    }

    fn pressure_index(&self, vertex: &str) -> (usize, EdgeModel) {
        let lay = self.network.layout();
        let tr = self.network.traces(vertex)[0];
        (lay.index(tr.edge, tr.node, 0), self.network.edges[tr.edge].model)
    }

    /// Vertex pressure in bound units along a trajectory.
    pub fn pressure_series(&self, traj: &Trajectory) -> Option<Vec<f64>> {
        let pb = self.pressure_bound.as_ref()?;
        let (i, model) = self.pressure_index(&pb.vertex);
        Some(
            traj.states
                .iter()
                .map(|q| model.pressure(q[i]) / self.network.pressure_unit)
                .collect(),
        )
    }

    /// Supply curve on the simulation grid.
    pub fn supply_curve(&self, controls: &ControlGrid) -> Result<Vec<f64>> {
        if self.network.is_gas() {
            let conv = self.network.conversion();
            return self
                .times()
                .iter()
                .map(|&t| conv.supply(controls.value_at(Channel::Inflow, t)))
                .collect();
        }
        Ok(self.simulate(controls)?.supply)
    }

    /// Terminal first-passage risk of the supply curve over the joint
    /// constraint window; `1` when the supply starts at or below `y0`.
    pub fn jcc_risk(&self, supply: &[f64]) -> Result<f64> {
        let spec = &self.constraint;
        let fdt = spec.fptd_dt.ok_or_else(|| invalid("joint chance constraint needs fptd_dt"))?;
        if supply[0] <= self.demand.y0 {
            return Ok(1.0);
        }
        let b = Boundary::tabulated(self.t0, self.dt, supply.to_vec())?;
        Ok(solve_volterra(&self.demand, &b, fdt, spec.t_hi)?.risk.min(1.0))
    }

    pub fn initial_multipliers(&self) -> Result<Multipliers> {
        Ok(Multipliers {
            scc: vec![0.0; self.scc_constraints()?.len()],
            pressure: vec![0.0; self.pressure_levels().len()],
            penalty: self.settings.penalty,
            jcc_penalty: self.settings.jcc_penalty,
        })
    }

    /// Grid data shared by all evaluations; `map` replaces the simulation
    /// when given.
    pub fn workspace(&self, map: Option<SupplyMap>) -> Result<Workspace> {
        let times = self.times();
        let weights = trapezoid_weights(&times, self.t_star)?;
        let moments = times
            .iter()
            .zip(&weights)
            .map(|(&t, &w)| if w > 0.0 { Moments::of(&self.demand, t).map(Some) } else { Ok(None) })
            .collect::<Result<_>>()?;
        Ok(Workspace {
            scc: self.scc_constraints()?,
            times,
            weights,
            moments,
            map,
        })
    }

    /// Cost, penalties and gradient for the given controls.
    pub fn evaluate(&self, controls: &ControlGrid, mult: &Multipliers, with_gradient: bool) -> Result<Evaluation> {
        self.evaluate_in(&self.workspace(None)?, controls, mult, with_gradient)
    }

    pub fn evaluate_in(
        &self,
        ws: &Workspace,
        controls: &ControlGrid,
        mult: &Multipliers,
        with_gradient: bool,
    ) -> Result<Evaluation> {
        let map = ws.map.as_ref();
        let (traj, supply) = match map {
            Some(m) => (None, m.supply(&controls.flatten())),
            None => {
                let traj = self.simulate(controls)?;
                let supply = traj.supply.clone();
                (Some(traj), supply)
            }
        };
        let net = &self.network;
        let times = &ws.times;
        let n_levels = times.len();
        let weights = &ws.weights;
        let gas = net.is_gas();
        let conv = net.conversion();

        // d cost / d supply and d cost / d control, per level
        let mut d_supply = vec![0.0; n_levels];
        let mut d_control = vec![[0.0; 2]; n_levels];
        let mut d_state: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_levels];
        let mut total = CostBreakdown::default();
        let w = &self.weights;
        for n in 0..n_levels {
            let Some(mo) = ws.moments[n] else {
                continue;
            };
            let (s, u) = (supply[n], level_controls(controls, times[n]));
            let c = mo.running_cost(w, s, u[0], u[1]);
            total.control += weights[n] * c.control;
            total.tracking += weights[n] * c.tracking;
            total.undersupply += weights[n] * c.undersupply;
            total.excess += weights[n] * c.excess;
            if with_gradient {
                let (dt_, du_, de_) = mo.sensitivities(s);
                d_supply[n] += weights[n] * (w.w_track * dt_ - w.w_under * du_ - w.w_ex * de_);
                d_control[n][0] += weights[n] * w.w_det * w.c_gas;
                if u[1] >= 0.0 {
                    d_control[n][1] += weights[n] * w.w_det * w.c_compr;
                }
            }
        }

        // regularization over neighbouring cells
        let mut grad = vec![0.0; controls.flatten().len()];
        let nc = controls.n_cells();
        let channels = controls.channels();
        for (ci, &ch) in channels.iter().enumerate() {
            let v = controls.values(ch);
            for k in 1..nc {
                let d = v[k] - v[k - 1];
                total.regularization += self.settings.regularization * d * d;
                grad[ci * nc + k] += 2.0 * self.settings.regularization * d;
                grad[ci * nc + k - 1] -= 2.0 * self.settings.regularization * d;
            }
        }

        // augmented Lagrangian terms of the pointwise constraints, weighted
        // by the time step like the cost itself
        let rho = mult.penalty;
        let h = self.dt;
        let mut scc_violation: f64 = 0.0;
        for (c, lam) in ws.scc.iter().zip(&mult.scc) {
            let g = c.bound - supply[c.level];
            scc_violation = scc_violation.max(g);
            let shifted = (lam + rho * g).max(0.0);
            total.penalty += h * (shifted * shifted - lam * lam) / (2.0 * rho);
            d_supply[c.level] -= h * shifted;
        }
        let mut pressure_violation: f64 = 0.0;
        let mut pressure = None;
        if let Some(pb) = &self.pressure_bound {
            let traj = traj.as_ref().ok_or_else(|| invalid("pressure bounds need a full simulation"))?;
            pressure = self.pressure_series(traj);
            let (i, model) = self.pressure_index(&pb.vertex);
            let pu = net.pressure_unit;
            for (c, lam) in self.pressure_levels().iter().zip(&mult.pressure) {
                let rho_v = traj.states[c.level][i];
                let g = c.bound - model.pressure(rho_v) / pu;
                pressure_violation = pressure_violation.max(g);
                let shifted = (lam + rho * g).max(0.0);
                total.penalty += h * (shifted * shifted - lam * lam) / (2.0 * rho);
                if shifted > 0.0 {
                    d_state[c.level].push((i, -h * shifted * model.pressure_derivative(rho_v) / pu));
                }
            }
        }

        let mut jcc_risk = None;
        if self.constraint.kind == ConstraintKind::Jcc {
            let risk = self.jcc_risk(&supply)?;
            jcc_risk = Some(risk);
            let excess = (risk - self.constraint.theta).max(0.0);
            total.penalty += mult.jcc_penalty * excess * excess;
            if with_gradient {
                let fd = self.jcc_gradient(controls, risk, mult.jcc_penalty, map)?;
                for (g, f) in grad.iter_mut().zip(fd) {
                    *g += f;
                }
            }
        }

        if with_gradient {
            if gas {
                for n in 0..n_levels {
                    d_control[n][0] += d_supply[n] * conv.supply_derivative(supply[n]);
                }
            }
            if let (Some(m), false) = (map, gas) {
                for (g, v) in grad.iter_mut().zip(m.transpose_apply(&d_supply)) {
                    *g += v;
                }
            } else {
                let traj = traj.as_ref().expect("simulated without a map");
                if !gas {
                    let idx = supply_index(net, &traj.layout);
                    for n in 0..n_levels {
                        if d_supply[n] != 0.0 {
                            d_state[n].push((idx, d_supply[n]));
                        }
                    }
                }
                let adj = adjoint_sensitivities(net, traj, &d_state)?;
                for n in 0..n_levels {
                    let cell = controls.cell_at(times[n]);
                    for (ci, &ch) in channels.iter().enumerate() {
                        grad[ci * nc + cell] += adj[n][ch.index()];
                    }
                }
            }
            for n in 0..n_levels {
                let cell = controls.cell_at(times[n]);
                for (ci, &ch) in channels.iter().enumerate() {
                    grad[ci * nc + cell] += d_control[n][ch.index()];
                }
            }
        }

        Ok(Evaluation {
            cost: total.finish(),
            gradient: grad,
            supply,
            pressure,
            trajectory: traj,
            scc_violation: scc_violation.max(0.0),
            pressure_violation: pressure_violation.max(0.0),
            jcc_risk,
        })
    }

    /// One-sided finite differences of `ρ_J max(risk − θ, 0)²` over the cells.
    fn jcc_gradient(&self, controls: &ControlGrid, risk: f64, rho_j: f64, map: Option<&SupplyMap>) -> Result<Vec<f64>> {
        let theta = self.constraint.theta;
        let base = rho_j * (risk - theta).max(0.0).powi(2);
        let x = controls.flatten();
        let nc = controls.n_cells();
        let channels = controls.channels();
        // cells entirely after the constraint window cannot change the risk
        let last_cell = controls.cell_at(self.constraint.t_hi);
        (0..x.len())
            .into_par_iter()
            .map(|i| {
                let ch = channels[i / nc];
                if i % nc > last_cell || (self.network.is_gas() && ch == Channel::Compressor) {
                    return Ok(0.0);
                }
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut probe = controls.clone();
                let mut xp = x.clone();
                xp[i] += h;
                probe.set_flat(&xp);
                let supply = match map {
                    Some(m) => m.supply(&xp),
                    None => self.supply_curve(&probe)?,
                };
                let r = self.jcc_risk(&supply)?;
                Ok((rho_j * (r - theta).max(0.0).powi(2) - base) / h)
            })
            .collect()
    }

    fn update_multipliers(&self, ws: &Workspace, ev: &Evaluation, mult: &mut Multipliers) {
        let rho = mult.penalty;
        for (c, lam) in ws.scc.iter().zip(mult.scc.iter_mut()) {
            *lam = (*lam + rho * (c.bound - ev.supply[c.level])).max(0.0);
        }
        if let Some(p) = &ev.pressure {
            for (c, lam) in self.pressure_levels().iter().zip(mult.pressure.iter_mut()) {
                *lam = (*lam + rho * (c.bound - p[c.level])).max(0.0);
            }
        }
    }
}

/// Per-problem data reused across evaluations.
#[derive(Debug, Clone)]
pub struct Workspace {
    times: Vec<f64>,
    weights: Vec<f64>,
    moments: Vec<Option<Moments>>,
    scc: Vec<Pointwise>,
    map: Option<SupplyMap>,
}

/// Supply of a linear network as an affine function of the flattened
/// controls, `S = s0 + Σ_i (x_i − x0_i) A_i`. The dynamics do not depend on
/// time, so every column is the first column of its channel delayed by a
/// whole number of cells.
#[derive(Debug, Clone)]
pub struct SupplyMap {
    x0: Vec<f64>,
    s0: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl SupplyMap {
    /// `None` for gas networks, whose supply is not affine in the controls.
    pub fn build(problem: &Problem, controls: &ControlGrid) -> Result<Option<Self>> {
        if problem.network.is_gas() {
            return Ok(None);
        }
        let x0 = controls.flatten();
        let s0 = problem.simulate(controls)?.supply;
        let nc = controls.n_cells();
        let steps = (controls.width / problem.dt).round() as usize;
        let mut columns = Vec::with_capacity(x0.len());
        for ci in 0..controls.channels().len() {
            let mut x = x0.clone();
            x[ci * nc] += 1.0;
            let mut c = controls.clone();
            c.set_flat(&x);
            let first: Vec<f64> = problem.simulate(&c)?.supply.iter().zip(&s0).map(|(a, b)| a - b).collect();
            for k in 0..nc {
                let shift = k * steps;
                let mut col = vec![0.0; s0.len()];
                col[shift..].copy_from_slice(&first[..s0.len() - shift]);
                columns.push(col);
            }
        }
        Ok(Some(SupplyMap { x0, s0, columns }))
    }

    /// One simulation per control variable; used to check [`SupplyMap::build`].
    pub fn build_direct(problem: &Problem, controls: &ControlGrid) -> Result<Self> {
        let x0 = controls.flatten();
        let s0 = problem.simulate(controls)?.supply;
        let columns = (0..x0.len())
            .into_par_iter()
            .map(|i| {
                let mut x = x0.clone();
                x[i] += 1.0;
                let mut c = controls.clone();
                c.set_flat(&x);
                let s = problem.simulate(&c)?.supply;
                Ok(s.iter().zip(&s0).map(|(a, b)| a - b).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(SupplyMap { x0, s0, columns })
    }

    pub fn supply(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.s0.clone();
        for ((col, xi), x0) in self.columns.iter().zip(x).zip(&self.x0) {
            let d = xi - x0;
            if d != 0.0 {
                for (v, a) in s.iter_mut().zip(col) {
                    *v += d * a;
                }
            }
        }
        s
    }

    /// `Aᵀ d`.
    pub fn transpose_apply(&self, d: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|col| dot(col, d)).collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Inner {
    x: Vec<f64>,
    eval: Evaluation,
    converged: bool,
    stalled: bool,
}

/// Limited-memory inverse Hessian of the recent steps.
struct Memory {
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    size: usize,
    /// Diagonal of the initial matrix, squared variable scales.
    diag: Vec<f64>,
}

impl Memory {
    fn new(size: usize, scale: &[f64]) -> Self {
        Memory {
            pairs: Default::default(),
            size,
            diag: scale.iter().map(|s| s * s).collect(),
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            return;
        }
        if self.pairs.len() == self.size {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion; entries flagged in `fixed` are held at zero.
    fn apply(&self, g: &[f64], fixed: &[bool]) -> Vec<f64> {
        let mask = |v: &mut Vec<f64>| {
            for (x, &f) in v.iter_mut().zip(fixed) {
                if f {
                    *x = 0.0;
                }
            }
        };
        let mut q = g.to_vec();
        mask(&mut q);
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            mask(&mut q);
            alphas.push(a);
        }
        let gamma = match self.pairs.back() {
            Some((s, y, _)) => dot(s, y) / y.iter().zip(&self.diag).map(|(v, d)| v * v * d).sum::<f64>(),
            None => 1.0,
        };
        for (v, d) in q.iter_mut().zip(&self.diag) {
            *v *= gamma * d;
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
            mask(&mut q);
        }
        q
    }
}

/// Projected descent with Armijo backtracking along the projection arc. The
/// step direction is the gradient scaled by a limited-memory quasi-Newton
/// matrix on the variables away from their bounds. Stops once the projected
/// gradient is below `tol`.
#[allow(clippy::too_many_arguments)]
fn descend(
    problem: &Problem,
    ws: &Workspace,
    template: &ControlGrid,
    x0: Vec<f64>,
    mult: &Multipliers,
    scale: &[f64],
    tol: f64,
    round: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<Inner> {
    let s = &problem.settings;
    let grid_at = |x: &[f64]| {
        let mut g = template.clone();
        g.set_flat(x);
        g
    };
    let mut x = x0;
    template.project(&mut x);
    let upper = template.flat_upper();
    let mut ev = problem.evaluate_in(ws, &grid_at(&x), mult, true)?;
    let mut memory = Memory::new(10, scale);
    let mut history = vec![ev.cost.total];
    for _ in 0..s.max_iter {
        let f = ev.cost.total;
        let g = ev.gradient.clone();
        let mut trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        template.project(&mut trial);
        let pg_norm = inf_norm(&x.iter().zip(&trial).map(|(a, b)| a - b).collect::<Vec<_>>());
        trace.push(TraceRow {
            iter: trace.len(),
            round,
            cost: f,
            grad_norm: pg_norm,
            scc_viol: ev.scc_violation.max(ev.pressure_violation),
            jcc_risk: ev.jcc_risk.unwrap_or(f64::NAN),
        });
        if pg_norm <= tol {
            return Ok(Inner { x, eval: ev, converged: true, stalled: false });
        }
        // variables pinned at a bound by the gradient
        let eps = 1e-12;
        let fixed: Vec<bool> = (0..x.len())
            .map(|i| (x[i] <= eps && g[i] > 0.0) || (x[i] >= upper[i] - eps && g[i] < 0.0))
            .collect();
        let mut dir: Vec<f64> = memory.apply(&g, &fixed).iter().map(|v| -v).collect();
        let mut alpha = 1.0;
        if memory.pairs.is_empty() || dot(&dir, &g) >= 0.0 {
            dir = (0..g.len()).map(|i| if fixed[i] { 0.0 } else { -g[i] * memory.diag[i] }).collect();
            let largest = (0..g.len()).fold(0.0f64, |m, i| m.max((dir[i] / scale[i]).abs()));
            alpha = 0.1 / largest.max(1e-300);
            memory.pairs.clear();
        }
        let mut accepted = None;
        for trial in 0..=s.max_backtracks {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
            template.project(&mut xn);
            let d: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&d) == 0.0 {
                break;
            }
            // the first trial is usually accepted, so it carries the gradient
            let evn = match problem.evaluate_in(ws, &grid_at(&xn), mult, trial == 0) {
                Ok(e) => e,
                Err(e) if infeasible_step(&e) => {
                    alpha *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if evn.cost.total <= f + s.armijo * dot(&g, &d) {
                let evn = if trial == 0 {
                    evn
                } else {
                    problem.evaluate_in(ws, &grid_at(&xn), mult, true)?
                };
                accepted = Some((xn, evn));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, evn)) = accepted else {
            if !memory.pairs.is_empty() {
                // retry once from a plain gradient step
                memory.pairs.clear();
                continue;
            }
            return Ok(Inner { x, eval: ev, converged: false, stalled: true });
        };
        memory.push(
            xn.iter().zip(&x).map(|(a, b)| a - b).collect(),
            evn.gradient.iter().zip(&g).map(|(a, b)| a - b).collect(),
        );
        x = xn;
        ev = evn;
        history.push(ev.cost.total);
        if history.len() > 10 {
            let old = history[history.len() - 11];
            if old - ev.cost.total <= s.stall_tol * (1.0 + ev.cost.total.abs()) {
                return Ok(Inner { x, eval: ev, converged: false, stalled: true });
            }
        }
    }
    Ok(Inner { x, eval: ev, converged: false, stalled: false })
}

/// Trial controls the network cannot carry, such as a pressure collapse.
fn infeasible_step(e: &Error) -> bool {
    matches!(
        e,
        Error::StepFailure { .. } | Error::NewtonFailure { .. } | Error::NonPositiveDensity { .. } | Error::Conversion(_)
    )
}

/// Per-variable scale: the largest magnitude on the variable's channel, at least one.
fn channel_scale(template: &ControlGrid, x: &[f64]) -> Vec<f64> {
    let nc = template.n_cells();
    x.chunks(nc)
        .flat_map(|c| {
            let m = inf_norm(c).max(1.0);
            std::iter::repeat_n(m, c.len())
        })
        .collect()
}

/// Solves the control problem from `problem.controls` as initial iterate.
///
/// Outer rounds update the multipliers until the constraints hold to
/// `feas_tol`. Inner solves of early rounds stop at a tolerance tightened
/// tenfold per round down to `grad_tol·(1 + |cost|)`.
pub fn optimize(problem: &Problem) -> Result<OptResult> {
    let problem = problem.clone().prepare()?;
    let template = problem.controls.clone();
    let s = problem.settings;
    let ws = problem.workspace(SupplyMap::build(&problem, &template)?)?;
    let mut mult = problem.initial_multipliers()?;
    let mut x = template.flatten();
    if problem.constraint.kind == ConstraintKind::Jcc {
        x = restore_jcc_feasibility(&problem, &ws, &template, x)?;
    }
    let scale = channel_scale(&template, &x);
    let mut trace = Vec::new();
    let mut last_violation = f64::INFINITY;
    let mut feasible = false;
    let mut inner_converged = false;
    let mut loose_tol = f64::INFINITY;
    let mut best: Option<(Vec<f64>, Evaluation)> = None;
    let rounds = s.outer_rounds.max(1);
    for round in 0..rounds {
        let start = problem.evaluate_in(&ws, &grid_from(&template, &x), &mult, false)?;
        let final_tol = s.grad_tol * (1.0 + start.cost.total.abs());
        if round == 0 {
            let g = problem.evaluate_in(&ws, &grid_from(&template, &x), &mult, true)?.gradient;
            loose_tol = 1e-2 * inf_norm(&g);
        }
        let tol = (loose_tol * 0.1f64.powi(round as i32)).max(final_tol);
        let inner = descend(&problem, &ws, &template, x, &mult, &scale, tol, round, &mut trace)?;
        x = inner.x;
        let ev = inner.eval;
        inner_converged = inner.converged && tol <= final_tol;
        let stalled = inner.stalled;
        let violation = ev.scc_violation.max(ev.pressure_violation);
        let risk_ok = ev
            .jcc_risk
            .is_none_or(|r| r <= problem.constraint.theta + s.jcc_tol);
        feasible = violation <= s.feas_tol && risk_ok;
        best = Some((x.clone(), ev));
        if feasible && (inner_converged || stalled || round + 1 == rounds || tol <= final_tol) {
            break;
        }
        let ev = &best.as_ref().expect("just set").1;
        problem.update_multipliers(&ws, ev, &mut mult);
        if violation > 0.25 * last_violation && violation > s.feas_tol {
            mult.penalty *= 10.0;
        }
        if !risk_ok {
            mult.jcc_penalty *= 10.0;
        }
        last_violation = violation;
    }
    let (x, ev) = best.expect("at least one outer round");
    let converged = feasible && inner_converged;
    let reason = match (feasible, inner_converged) {
        (true, true) => "projected gradient and feasibility tolerances met",
        (true, false) => "feasible; cost stalled or inner iteration limit reached",
        (false, _) => "outer round limit reached before feasibility",
    };
    let controls = grid_from(&template, &x);
    let trajectory = match ev.trajectory {
        Some(t) => t,
        None => problem.simulate(&controls)?,
    };
    Ok(OptResult {
        controls,
        objective: ev.cost,
        trace,
        converged,
        reason: reason.into(),
        max_violation: ev.scc_violation.max(ev.pressure_violation),
        jcc_risk: ev.jcc_risk,
        trajectory,
    })
}

fn grid_from(template: &ControlGrid, x: &[f64]) -> ControlGrid {
    let mut g = template.clone();
    g.set_flat(x);
    g
}

/// Raises the inflow uniformly until the joint constraint holds, so the
/// penalty method starts from a feasible point.
fn restore_jcc_feasibility(problem: &Problem, ws: &Workspace, template: &ControlGrid, x: Vec<f64>) -> Result<Vec<f64>> {
    let theta = problem.constraint.theta;
    let nc = template.n_cells();
    let shifted = |delta: f64| -> Result<(Vec<f64>, f64)> {
        let mut xs = x.clone();
        for v in &mut xs[..nc] {
            *v += delta;
        }
        template.project(&mut xs);
        let supply = match &ws.map {
            Some(m) => m.supply(&xs),
            None => problem.supply_curve(&grid_from(template, &xs))?,
        };
        let risk = problem.jcc_risk(&supply)?;
        Ok((xs, risk))
    };
    let (x0, r0) = shifted(0.0)?;
    if r0 <= theta {
        return Ok(x0);
    }
    let mut hi = 1e-3 * (1.0 + inf_norm(&x[..nc]));
    let mut found = None;
    for _ in 0..60 {
        let (xs, r) = shifted(hi)?;
        if r <= theta {
            found = Some(xs);
            break;
        }
        hi *= 2.0;
    }
    let Some(mut xs) = found else {
        return Err(domain("could not find controls satisfying the joint chance constraint"));
    };
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let (xm, r) = shifted(mid)?;
        if r <= theta {
            hi = mid;
            xs = xm;
        } else {
            lo = mid;
        }
    }
    Ok(xs)
}
