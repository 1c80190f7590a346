//! Oracle comparisons run by the `validate` command.

use serde::Serialize;

use crate::analysis::{analytic_optimal_control, coupling_residuals, exact_advection, weighted_l2};
use crate::control::{Channel, ControlGrid};
use crate::error::Result;
use crate::network::{EdgeModel, InitialData};
use crate::optimizer::{optimize, ConstraintKind, Problem};
use crate::scenario::{Scenario, ValidationSpec};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }

    fn decreasing(name: &str, values: &[f64]) -> Self {
        let worst = values.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        Check {
            name: name.into(),
            value: worst,
            threshold: 1.0,
            passed: values.len() > 1 && worst < 1.0,
            detail: format!("{values:?}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A non-constant control away from the kinks of costs in `max(u, 0)` and
/// of the undersupply at `t0`.
pub fn probe_controls(controls: &ControlGrid) -> ControlGrid {
    let mut varied = controls.clone();
    for ch in varied.channels() {
        for (k, v) in varied.values_mut(ch).iter_mut().enumerate() {
            let wiggle = 0.05 * (0.7 * k as f64 + 0.5).sin();
            *v = if *v == 0.0 { 0.1 + wiggle } else { *v * (1.0 + wiggle) };
        }
    }
    varied
}

/// Maximum of `|g_i − fd_i| / max(|fd_i|, 1e-3 ‖fd‖∞)` over the probed cells,
/// where `fd` are central differences of the objective. The joint-constraint
/// penalty, itself finite-differenced, is left out.
pub fn gradient_check(problem: &Problem, controls: &ControlGrid, max_cells: usize) -> Result<f64> {
    let mut problem = problem.clone();
    if problem.constraint.kind == ConstraintKind::Jcc {
        problem.constraint.kind = ConstraintKind::None;
    }
    let mut mult = problem.initial_multipliers()?;
    // make the augmented terms contribute
    mult.scc_mut().fill(0.01);
    mult.pressure_mut().fill(0.01);
    let ev = problem.evaluate(controls, &mult, true)?;
    let x = controls.flatten();
    let stride = x.len().div_ceil(max_cells.max(1)).max(1);
    let probes: Vec<usize> = (0..x.len()).step_by(stride).collect();
    let mut fd = Vec::with_capacity(probes.len());
    for &i in &probes {
        let h = 1e-4 * x[i].abs().max(1.0);
        let f = |d: f64| -> Result<f64> {
            let mut c = controls.clone();
            let mut xp = x.clone();
            xp[i] += d;
            c.set_flat(&xp);
            Ok(problem.evaluate(&c, &mult, false)?.cost.total)
        };
        fd.push((f(h)? - f(-h)?) / (2.0 * h));
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1e-3;
    Ok(probes
        .iter()
        .zip(&fd)
        .map(|(&i, f)| (ev.gradient[i] - f).abs() / f.abs().max(scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max))
}

/// Space-time `L²` distance between the simulated density on a single
/// advection edge and the exact solution for the same piecewise-constant
/// inflow.
pub fn advection_error(problem: &Problem, controls: &ControlGrid) -> Result<f64> {
    let net = &problem.network;
    let e = &net.edges[0];
    let EdgeModel::Advection { speed, source } = e.model else {
        return Err(crate::error::invalid("advection_error needs a single advection edge"));
    };
    let InitialData::Uniform(v) = &problem.initial else {
        return Err(crate::error::invalid("advection_error needs uniform initial data"));
    };
    let rho0 = v[0][0];
    let traj = problem.simulate(controls)?;
    let dx = e.dx();
    let mut sum = 0.0;
    for (t, q) in traj.times.iter().zip(&traj.states).skip(1) {
        for j in 0..=e.cells {
            let x = e.node_x(j) - e.a;
            let w = if j == 0 || j == e.cells { 0.5 } else { 1.0 };
            let exact = exact_advection(x, *t, speed, source, |_| rho0, |s| controls.value_at(Channel::Inflow, s.max(problem.t0)));
            sum += w * dx * traj.dt * (q[traj.layout.index(0, j, 0)] - exact).powi(2);
        }
    }
    Ok(sum.sqrt())
}

/// `L²(t0, T − L/λ)` distance between the piecewise-constant optimized
/// inflow and the closed-form optimal inflow, and the closed form's norm.
/// Each control cell is integrated with a 16-point midpoint rule.
pub fn control_distance(problem: &Problem, controls: &ControlGrid) -> Result<(f64, f64)> {
    const SUB: usize = 16;
    let e = &problem.network.edges[0];
    let EdgeModel::Advection { speed, source } = e.model else {
        return Err(crate::error::invalid("control_distance needs a single advection edge"));
    };
    let h = controls.width / SUB as f64;
    let times: Vec<f64> = (0..controls.n_cells() * SUB)
        .map(|i| controls.t0 + (i as f64 + 0.5) * h)
        .collect();
    let exact = analytic_optimal_control(
        &problem.demand,
        speed,
        source,
        e.b - e.a,
        &problem.constraint,
        problem.t_end,
        &times,
    )?;
    let n = exact.len();
    let w = vec![h; n];
    let target: Vec<f64> = exact.iter().map(|p| p.1).collect();
    let got: Vec<f64> = exact.iter().map(|p| controls.value_at(Channel::Inflow, p.0)).collect();
    let dist = weighted_l2(&w, &got, &target);
    let norm = weighted_l2(&w, &target, &vec![0.0; n]);
    Ok((dist, norm))
}

fn single_advection(s: &Scenario) -> bool {
    s.network
        .as_ref()
        .is_some_and(|n| n.edges.len() == 1 && matches!(n.edges[0].model, EdgeModel::Advection { .. }))
}

/// Runs every check that applies to the scenario.
pub fn validate_scenario(s: &Scenario, refine: usize) -> Result<ValidationReport> {
    let spec = s.validation.unwrap_or_default();
    let mut checks = Vec::new();
    if s.network.is_some() {
        let problem = s.problem(refine)?.prepare()?;
        let controls = problem.controls.clone();
        let traj = problem.simulate(&controls)?;
        if !problem.network.couplings.is_empty() {
            let worst = coupling_residuals(&problem.network, &traj).into_iter().fold(0.0, f64::max);
            checks.push(Check::at_most(
                "coupling residual",
                worst,
                spec.coupling_tolerance,
                String::new(),
            ));
        }
        let err = gradient_check(&problem, &probe_controls(&controls), 20)?;
        checks.push(Check::at_most(
            "adjoint gradient vs central differences",
            err,
            spec.gradient_tolerance,
            String::new(),
        ));
    }
    if single_advection(s) {
        checks.extend(advection_checks(s, &spec, refine)?);
    }
    Ok(ValidationReport {
        scenario: s.name.clone(),
        checks,
    })
}

/// Refinement study of the optimized control against the closed form.
pub fn advection_checks(s: &Scenario, spec: &ValidationSpec, refine: usize) -> Result<Vec<Check>> {
    let mut sim_err = Vec::new();
    let mut ctrl_dist = Vec::new();
    let mut last_norm = 1.0;
    for level in 0..=spec.refinements {
        let problem = s.problem(refine << level)?.prepare()?;
        let opt = optimize(&problem)?;
        sim_err.push(advection_error(&problem, &opt.controls)?);
        let (d, n) = control_distance(&problem, &opt.controls)?;
        ctrl_dist.push(d);
        last_norm = n;
    }
    let finest = *ctrl_dist.last().unwrap() / last_norm;
    Ok(vec![
        Check::decreasing("advection error under refinement", &sim_err),
        Check::decreasing("distance to the closed-form control under refinement", &ctrl_dist),
        Check::at_most(
            "relative distance to the closed-form control on the finest grid",
            finest,
            spec.relative_tolerance,
            String::new(),
        ),
    ])
}
