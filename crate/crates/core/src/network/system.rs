//! Global residual of one implicit box step, Newton solve and discrete adjoint.

use super::{BoundaryValue, CouplingSpec, Layout, Network, Quantity, Trace, Trajectory};
use crate::control::Channel;
use crate::error::{Error, Result};
use crate::linalg::{LuPattern, SparseLu};

const MAX_DAMPING: usize = 8;

struct Assembly {
    res: Vec<f64>,
    jac: Vec<(usize, usize, f64)>,
    with_jac: bool,
    ctrl: Vec<(usize, Channel, f64)>,
}

impl Assembly {
    fn row(&mut self, value: f64) -> usize {
        self.res.push(value);
        self.res.len() - 1
    }

    fn entry(&mut self, row: usize, col: usize, v: f64) {
        if self.with_jac && v != 0.0 {
            self.jac.push((row, col, v));
        }
    }
}

/// Solves consecutive implicit box steps for one network and step size.
pub struct StepSolver<'a> {
    net: &'a Network,
    layout: Layout,
    /// Step in model seconds.
    dt: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
    cached: Option<SparseLu>,
    pattern: Option<LuPattern>,
    control_rows: Vec<(usize, Channel, f64)>,
}

impl<'a> StepSolver<'a> {
    /// `dt` in scenario time units.
    pub fn new(net: &'a Network, dt: f64) -> Result<Self> {
        net.validate()?;
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        let layout = net.layout();
        let mut s = StepSolver {
            net,
            layout,
            dt: dt * net.time_scale,
            newton_tol: 1e-10,
            max_iter: 50,
            cached: None,
            pattern: None,
            control_rows: Vec::new(),
        };
        let probe = s.probe_state();
        s.control_rows = s.assemble(&probe, &probe, [0.0, 0.0], false).ctrl;
        Ok(s)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// A state safe to evaluate the residual at (unit density for gas).
    fn probe_state(&self) -> Vec<f64> {
        vec![if self.net.is_gas() { 1.0 } else { 0.0 }; self.layout.len()]
    }

    fn quantity(&self, q: &[f64], tr: Trace, quant: Quantity) -> (f64, usize, f64) {
        let e = &self.net.edges[tr.edge];
        let comp = match quant {
            Quantity::Density | Quantity::Voltage | Quantity::Pressure => 0,
            Quantity::Flow | Quantity::Current => 1,
        };
        let i = self.layout.index(tr.edge, tr.node, comp);
        if quant == Quantity::Pressure {
            let pu = self.net.pressure_unit;
            (e.model.pressure(q[i]) / pu, i, e.model.pressure_derivative(q[i]) / pu)
        } else {
            (q[i], i, 1.0)
        }
    }

    fn coupling_quantities(&self) -> (Quantity, Quantity) {
        if self.net.is_gas() {
            (Quantity::Pressure, Quantity::Flow)
        } else {
            (Quantity::Voltage, Quantity::Current)
        }
    }

    fn assemble(&self, qn: &[f64], qo: &[f64], u: [f64; 2], with_jac: bool) -> Assembly {
        let net = self.net;
        let lay = &self.layout;
        let mut a = Assembly {
            res: Vec::with_capacity(lay.len()),
            jac: Vec::new(),
            with_jac,
            ctrl: Vec::new(),
        };
        let dt = self.dt;
        for (ei, e) in net.edges.iter().enumerate() {
            let m = &e.model;
            let nc = lay.components(ei);
            let r = dt / e.dx();
            let mut prev = lay.node(qn, ei, 0);
            let mut f_prev = m.flux(prev);
            let mut s_prev = m.source(prev);
            for j in 1..=e.cells {
                let cur = lay.node(qn, ei, j);
                let f_cur = m.flux(cur);
                let s_cur = m.source(cur);
                let old_l = lay.node(qo, ei, j - 1);
                let old_r = lay.node(qo, ei, j);
                let (df_l, ds_l, df_r, ds_r) = if with_jac {
                    (m.flux_jacobian(prev), m.source_jacobian(prev), m.flux_jacobian(cur), m.source_jacobian(cur))
                } else {
                    Default::default()
                };
                for c in 0..nc {
                    let val = 0.5 * (prev[c] + cur[c]) - 0.5 * (old_l[c] + old_r[c])
                        + r * (f_cur[c] - f_prev[c])
                        - 0.5 * dt * (s_cur[c] + s_prev[c]);
                    let row = a.row(val);
                    if with_jac {
                        for d in 0..nc {
                            let id = if c == d { 0.5 } else { 0.0 };
                            a.entry(row, lay.index(ei, j - 1, d), id - r * df_l[c][d] - 0.5 * dt * ds_l[c][d]);
                            a.entry(row, lay.index(ei, j, d), id + r * df_r[c][d] - 0.5 * dt * ds_r[c][d]);
                        }
                    }
                }
                prev = cur;
                f_prev = f_cur;
                s_prev = s_cur;
            }
        }

        let vin_trace = net.traces(&net.inflow_vertex)[0];
        for spec in &net.left {
            self.boundary_row(&mut a, qn, vin_trace, spec.quantity, spec.value, u);
        }
        for v in net.vertices() {
            if let Some(spec) = net.couplings.get(&v) {
                self.coupling_rows(&mut a, qn, &v, *spec, u);
            }
        }
        let vd_trace = net.traces(&net.demand_vertex)[0];
        for spec in &net.right {
            self.boundary_row(&mut a, qn, vd_trace, spec.quantity, spec.value, u);
        }
        a
    }

    fn boundary_row(&self, a: &mut Assembly, q: &[f64], tr: Trace, quant: Quantity, value: BoundaryValue, u: [f64; 2]) {
        let (val, i, d) = self.quantity(q, tr, quant);
        let target = match value {
            BoundaryValue::Control => u[Channel::Inflow.index()],
            BoundaryValue::Constant(c) => c,
        };
        let row = a.row(val - target);
        a.entry(row, i, d);
        if value == BoundaryValue::Control {
            a.ctrl.push((row, Channel::Inflow, -1.0));
        }
    }

    fn coupling_rows(&self, a: &mut Assembly, q: &[f64], v: &str, spec: CouplingSpec, u: [f64; 2]) {
        let traces = self.net.traces(v);
        if self.layout.components(0) == 1 {
            // advection chain: λ_in ρ_in = λ_out ρ_out
            let mut row_val = 0.0;
            let mut entries = Vec::new();
            for tr in &traces {
                let speed = match self.net.edges[tr.edge].model {
                    super::EdgeModel::Advection { speed, .. } => speed,
                    _ => unreachable!(),
                };
                let sign = if tr.incoming { 1.0 } else { -1.0 };
                let i = self.layout.index(tr.edge, tr.node, 0);
                row_val += sign * speed * q[i];
                entries.push((i, sign * speed));
            }
            let row = a.row(row_val);
            for (i, d) in entries {
                a.entry(row, i, d);
            }
            return;
        }
        let (pot, flow) = self.coupling_quantities();
        match spec {
            CouplingSpec::Kirchhoff | CouplingSpec::Withdrawal { .. } => {
                let (p0, i0, d0) = self.quantity(q, traces[0], pot);
                for tr in &traces[1..] {
                    let (p, i, d) = self.quantity(q, *tr, pot);
                    let row = a.row(p0 - p);
                    a.entry(row, i0, d0);
                    a.entry(row, i, -d);
                }
            }
            CouplingSpec::Compressor => {
                let (pin, iin, din) = self.quantity(q, traces[0], pot);
                let lift = u[Channel::Compressor.index()];
                for tr in &traces[1..] {
                    let (p, i, d) = self.quantity(q, *tr, pot);
                    let row = a.row(p - pin - lift);
                    a.entry(row, i, d);
                    a.entry(row, iin, -din);
                    a.ctrl.push((row, Channel::Compressor, -1.0));
                }
            }
        }
        let mut balance = 0.0;
        let mut entries = Vec::with_capacity(traces.len());
        for tr in &traces {
            let (f, i, d) = self.quantity(q, *tr, flow);
            let sign = if tr.incoming { 1.0 } else { -1.0 };
            balance += sign * f;
            entries.push((i, sign * d));
        }
        if let CouplingSpec::Withdrawal { scale } = spec {
            balance -= scale * u[Channel::Inflow.index()];
        }
        let row = a.row(balance);
        for (i, d) in entries {
            a.entry(row, i, d);
        }
        if let CouplingSpec::Withdrawal { scale } = spec {
            a.ctrl.push((row, Channel::Inflow, -scale));
        }
    }

    pub fn residual(&self, qn: &[f64], qo: &[f64], u: [f64; 2]) -> Vec<f64> {
        self.assemble(qn, qo, u, false).res
    }

    fn factor_at(&mut self, q: &[f64]) -> Result<SparseLu> {
        let a = self.assemble(q, q, [0.0, 0.0], true);
        match &self.pattern {
            Some(p) if p.matches(&a.jac) => p.factor(&a.jac),
            _ => {
                let p = LuPattern::new(self.layout.len(), &a.jac)?;
                let lu = p.factor(&a.jac);
                self.pattern = Some(p);
                lu
            }
        }
    }

    fn positive(&self, q: &[f64]) -> bool {
        if !self.net.is_gas() {
            return true;
        }
        (0..self.layout.n_edges()).all(|e| (0..=self.layout.cells(e)).all(|j| q[self.layout.index(e, j, 0)] > 0.0))
    }

    fn converged(&self, res: &[f64], q: &[f64]) -> (bool, f64) {
        let r = max_norm(res);
        (r <= self.newton_tol * (1.0 + max_norm(q)), r)
    }

    /// Advances `qo` by one step with controls `u = [inflow, compressor]`.
    /// Returns the new state and the number of Newton iterations.
    pub fn step(&mut self, qo: &[f64], u: [f64; 2], t: f64) -> Result<(Vec<f64>, usize)> {
        let mut q = qo.to_vec();
        if self.net.is_linear() {
            if self.cached.is_none() {
                self.cached = Some(self.factor_at(qo)?);
            }
            let lu = self.cached.as_ref().unwrap();
            for it in 0..3 {
                let res = self.residual(&q, qo, u);
                let (ok, r) = self.converged(&res, &q);
                if ok {
                    return Ok((q, it));
                }
                if it == 2 {
                    return Err(Error::NewtonFailure { time: t, residual: r, iterations: it });
                }
                let mut delta = res;
                lu.solve(&mut delta)?;
                for (x, d) in q.iter_mut().zip(&delta) {
                    *x -= d;
                }
            }
            unreachable!()
        }
        let mut res = self.residual(&q, qo, u);
        let mut it = 0;
        loop {
            let (ok, r) = self.converged(&res, &q);
            if ok {
                return Ok((q, it));
            }
            if it == self.max_iter {
                return Err(Error::NewtonFailure { time: t, residual: r, iterations: it });
            }
            it += 1;
            // chord steps reuse the last factorization while they contract
            let fresh = self.cached.is_none();
            if fresh {
                self.cached = Some(self.factor_at(&q)?);
            }
            let mut delta = res.clone();
            self.cached.as_ref().unwrap().solve(&mut delta)?;
            if !fresh {
                let trial: Vec<f64> = q.iter().zip(&delta).map(|(x, d)| x - d).collect();
                if self.positive(&trial) {
                    let trial_res = self.residual(&trial, qo, u);
                    if max_norm(&trial_res) <= 0.5 * r {
                        q = trial;
                        res = trial_res;
                        continue;
                    }
                }
                self.cached = None;
                continue;
            }
            // residual at roundoff level of large flux terms
            if max_norm(&delta) <= STEP_TOL * (1.0 + max_norm(&q)) {
                let trial: Vec<f64> = q.iter().zip(&delta).map(|(x, d)| x - d).collect();
                if self.positive(&trial) {
                    return Ok((trial, it));
                }
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_DAMPING {
                let trial: Vec<f64> = q.iter().zip(&delta).map(|(x, d)| x - alpha * d).collect();
                if self.positive(&trial) {
                    let trial_res = self.residual(&trial, qo, u);
                    if max_norm(&trial_res) < r {
                        q = trial;
                        res = trial_res;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                if !self.positive(&q) {
                    return Err(Error::NonPositiveDensity { edge: String::new(), time: t });
                }
                return Err(Error::NewtonFailure { time: t, residual: r, iterations: it });
            }
        }
    }

    fn transpose_solve(&mut self, q: &[f64], rhs: &mut [f64]) -> Result<()> {
        match &self.cached {
            Some(lu) if self.net.is_linear() => lu.solve_transpose(rhs),
            _ => self.factor_at(q)?.solve_transpose(rhs),
        }
    }
}

const STEP_TOL: f64 = 1e-12;

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One implicit box step of `net` with step `dt` (scenario time units).
pub fn ibox_step(net: &Network, state: &[f64], controls: [f64; 2], dt: f64) -> Result<Vec<f64>> {
    let mut solver = StepSolver::new(net, dt)?;
    Ok(solver.step(state, controls, 0.0)?.0)
}

/// Steady state for constant controls, by large implicit pseudo-time steps
/// from `guess`.
pub fn steady_state(net: &Network, guess: &[f64], controls: [f64; 2]) -> Result<Vec<f64>> {
    let mut solver = StepSolver::new(net, 1e6 / net.time_scale)?;
    let mut q = guess.to_vec();
    for _ in 0..200 {
        let (next, _) = solver.step(&q, controls, 0.0)?;
        let change = q.iter().zip(&next).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        if change <= 1e-11 * (1.0 + max_norm(&q)) {
            return Ok(q);
        }
    }
    Err(Error::Network("pseudo-time iteration did not reach a steady state".into()))
}

/// Reverse sweep through the time levels of `traj`.
///
/// `dphi[n]` lists the sparse gradient of the level-`n` objective terms with
/// respect to the state `Q^n`. Returns, per level, the total derivative of
/// those terms with respect to the controls acting at that level.
pub fn adjoint_sensitivities(net: &Network, traj: &Trajectory, dphi: &[Vec<(usize, f64)>]) -> Result<Vec<[f64; 2]>> {
    let n_levels = traj.states.len();
    let mut solver = StepSolver::new(net, traj.dt)?;
    let lay = solver.layout().clone();
    if net.is_linear() {
        solver.cached = Some(solver.factor_at(&traj.states[0])?);
    }
    let mut sens = vec![[0.0; 2]; n_levels];
    let mut lambda: Vec<f64> = Vec::new();
    for n in (1..n_levels).rev() {
        let mut rhs = vec![0.0; lay.len()];
        if let Some(d) = dphi.get(n) {
            for &(i, v) in d {
                rhs[i] += v;
            }
        }
        if !lambda.is_empty() {
            // subtract B^T λ_{n+1}; the old level enters box rows with −1/2
            let mut row = 0;
            for e in 0..lay.n_edges() {
                let nc = lay.components(e);
                for j in 1..=lay.cells(e) {
                    for c in 0..nc {
                        let l = lambda[row];
                        rhs[lay.index(e, j - 1, c)] += 0.5 * l;
                        rhs[lay.index(e, j, c)] += 0.5 * l;
                        row += 1;
                    }
                }
            }
        }
        solver.transpose_solve(&traj.states[n], &mut rhs)?;
        for &(row, ch, coeff) in &solver.control_rows {
            sens[n][ch.index()] -= rhs[row] * coeff;
        }
        lambda = rhs;
    }
    Ok(sens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::single_advection;

    #[test]
    fn constant_state_is_a_fixed_point() {
        let net = single_advection(4.0, 0.0, 10);
        let q = vec![1.7; 11];
        let next = ibox_step(&net, &q, [1.7, 0.0], 0.05).unwrap();
        assert!(next.iter().all(|v| (v - 1.7).abs() < 1e-12));
    }

    #[test]
    fn residual_vanishes_after_a_step() {
        let net = single_advection(4.0, -1.0, 8);
        let q: Vec<f64> = (0..9).map(|j| (j as f64 / 8.0).sin()).collect();
        let mut s = StepSolver::new(&net, 0.125).unwrap();
        let (next, _) = s.step(&q, [0.3, 0.0], 0.125).unwrap();
        assert!(max_norm(&s.residual(&next, &q, [0.3, 0.0])) < 1e-13);
        assert_eq!(s.control_rows, vec![(8, Channel::Inflow, -1.0)]);
    }
}
