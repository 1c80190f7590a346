//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccflow::analysis::coupling_residuals;
use ccflow::cost::{excess_revenue, tracking_cost, undersupply_cost};
use ccflow::fptd::{mc_first_passage_risk, risk_level, solve_volterra, Boundary};
use ccflow::network::{ibox_step, EdgeModel};
use ccflow::optimizer::{optimize, scc_bound, ConstraintKind, Problem};
use ccflow::scenario::Scenario;
use ccflow::validation::{advection_checks, advection_error, gradient_check, probe_controls};
use ccflow::{Channel, Result};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn bundled(name: &str) -> Scenario {
    Scenario::bundled(name).expect("bundled scenario")
}

fn prepared(s: &Scenario) -> Result<Problem> {
    s.problem(1)?.prepare()
}

fn first_passage_reference() -> Result<Verdict> {
    let s = bundled("table1");
    let spec = s.fptd.expect("fptd section");
    let boundary = s.fptd_boundary()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (dt, expected) in [(480.0, 0.1481), (60.0, 0.1479), (6.0, 0.1479), (1.0, 0.1479)] {
        let start = Instant::now();
        let risk = solve_volterra(&s.demand, &boundary, dt, spec.t_end)?.risk;
        let secs = start.elapsed().as_secs_f64();
        ok &= (risk - expected).abs() <= 5e-4 && secs < 10.0;
        parts.push(format!("dt={dt}: {risk:.5} ({secs:.2} s)"));
    }
    verdict(ok, parts.join(", "))
}

fn monte_carlo_cross_check() -> Result<Verdict> {
    let s = bundled("table1");
    let spec = s.fptd.expect("fptd section");
    let boundary = s.fptd_boundary()?;
    let risk = solve_volterra(&s.demand, &boundary, 1.0, spec.t_end)?.risk;
    let start = Instant::now();
    let mc = mc_first_passage_risk(&s.demand, &boundary, 1.0, spec.t_end, 100_000, s.seed)?;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        (mc - risk).abs() <= 0.005 && secs < 120.0,
        format!("volterra {risk:.5}, monte carlo {mc:.5}, |diff| {:.5} ({secs:.1} s)", (mc - risk).abs()),
    )
}

fn closed_form_advection_control() -> Result<Verdict> {
    let s = bundled("advect_validate");
    let checks = advection_checks(&s, &s.validation.unwrap_or_default(), 1)?;
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.4}", c.name, c.value))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(passed, detail)
}

fn tele_bound_attainment() -> Result<Verdict> {
    let problem = prepared(&bundled("tele"))?;
    let res = optimize(&problem)?;
    let traj = &res.trajectory;
    let bound = scc_bound(&problem.demand, &problem.constraint, &traj.times)?;
    let t_lo = problem.constraint.t_lo;
    let (mut dev, mut mean_sq, mut gap, mut bound_sq) = (0.0, 0.0, 0.0, 0.0);
    let mut violation = 0.0f64;
    for (n, &t) in traj.times.iter().enumerate() {
        let s = traj.supply[n];
        match bound[n] {
            Some(b) => {
                violation = violation.max(b - s);
                gap += (s - b).powi(2);
                bound_sq += b * b;
            }
            None if t >= problem.t_star - 1e-9 && t < t_lo => {
                let m = problem.demand.mean(t)?;
                dev += (s - m).powi(2);
                mean_sq += m * m;
            }
            None => {}
        }
    }
    let before = (dev / mean_sq).sqrt();
    let on = (gap / bound_sq).sqrt();
    verdict(
        violation <= 1e-6 && on <= 1e-2 && before <= 0.05,
        format!(
            "max violation {violation:.2e}, relative L2 to bound on I_CC {on:.2e}, relative L2 to mean before {t_lo}: {before:.4}"
        ),
    )
}

fn jcc_dominates_scc() -> Result<Verdict> {
    let s = bundled("gtp_l");
    let jcc_problem = prepared(&s)?;
    let jcc = optimize(&jcc_problem)?;
    let mut scc_s = s.clone();
    scc_s.constraint.kind = ConstraintKind::Scc;
    scc_s.constraint.fptd_dt = None;
    let scc = optimize(&prepared(&scc_s)?)?;
    let c = &jcc_problem.constraint;
    let times = &jcc.trajectory.times;
    let margin = times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= c.t_lo - 1e-9 && t <= c.t_hi + 1e-9)
        .map(|(n, _)| jcc.trajectory.supply[n] - scc.trajectory.supply[n])
        .fold(f64::INFINITY, f64::min);
    let boundary = Boundary::tabulated(jcc_problem.t0, jcc_problem.dt, jcc.trajectory.supply.clone())?;
    let fdt = c.fptd_dt.expect("fptd_dt");
    let (risk, _) = risk_level(&jcc_problem.demand, &boundary, fdt, c.t_hi, c.theta)?;
    verdict(
        margin >= 0.0 && risk <= c.theta + 1e-4,
        format!("min(S_jcc - S_scc) on I_CC {margin:.4}, certified risk {risk:.5}"),
    )
}

fn moment_oracles() -> Result<Verdict> {
    const PATHS: usize = 1_000_000;
    let p = bundled("tele").demand;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_z = 0.0f64;
    let mut worst_identity = 0.0f64;
    for pair in 0..20 {
        let t = rng.random_range(0.05..4.0);
        let m = p.mean(t)?;
        let sd = p.variance(t)?.sqrt();
        let s = m + sd * rng.random_range(-2.0..2.0);
        let paths = p.sample_paths(&[p.t0, t], PATHS, 1000 + pair)?;
        let ys: Vec<f64> = paths.paths().map(|row| row[1]).collect();
        let estimators: [(f64, &dyn Fn(f64) -> f64); 3] = [
            (tracking_cost(&p, t, s)?, &|y| (s - y).powi(2)),
            (undersupply_cost(&p, t, s)?, &|y| (s - y).min(0.0)),
            (excess_revenue(&p, t, s)?, &|y| (s - y).max(0.0)),
        ];
        for (exact, f) in estimators {
            let vals: Vec<f64> = ys.iter().map(|&y| f(y)).collect();
            let mean = vals.iter().sum::<f64>() / PATHS as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (PATHS - 1) as f64;
            let se = (var / PATHS as f64).sqrt();
            worst_z = worst_z.max((mean - exact).abs() / se);
        }
        let identity = excess_revenue(&p, t, s)? + undersupply_cost(&p, t, s)? - (s - m);
        worst_identity = worst_identity.max(identity.abs());
    }
    verdict(
        worst_z <= 4.0 && worst_identity <= 1e-10,
        format!("worst |error| {worst_z:.2} standard errors, identity residual {worst_identity:.1e}"),
    )
}

fn coarse_controls(name: &str, cells: usize) -> Result<Problem> {
    let mut s = bundled(name);
    let span = s.horizon.t_end - s.horizon.t0;
    if let Some(c) = s.controls.as_mut() {
        c.width = span / cells as f64;
    }
    prepared(&s)
}

fn adjoint_gradients() -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["advect_validate", "tele"] {
        let problem = coarse_controls(name, 16)?;
        let err = gradient_check(&problem, &probe_controls(&problem.controls), 20)?;
        ok &= err < 1e-5;
        parts.push(format!("{name} ({} cells): {err:.2e}", problem.controls.n_cells()));
    }
    verdict(ok, parts.join(", "))
}

fn scheme_properties() -> Result<Verdict> {
    // constant states of source-free models
    let mut worst_fixed = 0.0f64;
    let mut adv = bundled("advect_validate").network.expect("network");
    for e in &mut adv.edges {
        e.model = EdgeModel::Advection { speed: 4.0, source: 0.0 };
    }
    let q: Vec<f64> = vec![1.7; adv.layout().len()];
    let next = ibox_step(&adv, &q, [1.7, 0.0], 1.0 / 256.0)?;
    worst_fixed = worst_fixed.max(next.iter().map(|v| (v - 1.7).abs()).fold(0.0, f64::max));
    let tele = bundled("tele");
    let mut net = tele.network.clone().expect("network");
    for e in &mut net.edges {
        if let EdgeModel::Telegrapher { resistance, conductance, .. } = &mut e.model {
            *resistance = 0.0;
            *conductance = 0.0;
        }
    }
    let q = tele.initial.as_ref().expect("initial").data().state(&net, [1.0, 0.0])?;
    let next = ibox_step(&net, &q, [1.0, 0.0], tele.horizon.dt)?;
    worst_fixed = worst_fixed.max(next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

    // error against the exact advection solution for a smooth inflow
    let s = bundled("advect_validate");
    let mut errors = Vec::new();
    for refine in [1, 2, 4] {
        let problem = s.problem(refine)?.prepare()?;
        let mut controls = problem.controls.clone();
        let (t0, w) = (controls.t0, controls.width);
        for (k, v) in controls.values_mut(Channel::Inflow).iter_mut().enumerate() {
            let t = t0 + (k as f64 + 0.5) * w;
            *v = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * t).sin();
        }
        errors.push(advection_error(&problem, &controls)?);
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);

    // coupling residuals against the Newton tolerance, every level
    let mut coupling_ok = true;
    let mut worst_ratio = 0.0f64;
    for name in ["tele", "gtp_s", "gtp_l"] {
        let problem = prepared(&bundled(name))?;
        let traj = problem.simulate(&probe_controls(&problem.controls))?;
        let res = coupling_residuals(&problem.network, &traj);
        // level 0 is the prescribed initial state, not a step result
        for (r, q) in res.iter().zip(&traj.states).skip(1) {
            let tol = 1e-10 * (1.0 + q.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            worst_ratio = worst_ratio.max(r / tol);
            coupling_ok &= *r <= tol;
        }
    }
    verdict(
        worst_fixed <= 1e-12 && decreasing && coupling_ok,
        format!(
            "fixed-point drift {worst_fixed:.1e}, advection L2 errors {:?}, worst coupling residual / tolerance {worst_ratio:.2e}",
            errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn gas_pressure_bound() -> Result<Verdict> {
    let problem = prepared(&bundled("gtp_s"))?;
    let res = optimize(&problem)?;
    let pb = problem.pressure_bound.clone().expect("pressure bound");
    let p = problem.pressure_series(&res.trajectory).expect("pressure series");
    let lowest = p.iter().copied().fold(f64::INFINITY, f64::min);
    let t_lo = problem.constraint.t_lo;
    let c = &res.controls;
    let lift = c.values(Channel::Compressor);
    let (mut pre, mut during) = (Vec::new(), Vec::new());
    for (k, &v) in lift.iter().enumerate() {
        if c.t0 + k as f64 * c.width < t_lo - 1e-9 {
            pre.push(v);
        } else {
            during.push(v);
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (pre, during) = (avg(&pre), avg(&during));
    verdict(
        lowest >= pb.min - problem.settings.feas_tol && during > pre,
        format!(
            "lowest pressure at {} {lowest:.6} (bound {}), mean lift before I_CC {pre:.4}, during {during:.4}",
            pb.vertex, pb.min
        ),
    )
}

type Criterion = (&'static str, fn() -> Result<Verdict>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("first-passage risk on the reference configuration", first_passage_reference),
        ("monte carlo cross-check at dt = 1", monte_carlo_cross_check),
        ("closed-form optimal advection control", closed_form_advection_control),
        ("single chance constraint bound attainment (tele)", tele_bound_attainment),
        ("joint constraint dominates single constraint (gtp_l)", jcc_dominates_scc),
        ("moment reformulations against monte carlo", moment_oracles),
        ("adjoint gradients against central differences", adjoint_gradients),
        ("box scheme fixed points, convergence, couplings", scheme_properties),
        ("gas pressure bound and compressor lift (gtp_s)", gas_pressure_bound),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match check() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "{} {}. {name}: {detail} [{:.1} s]",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
