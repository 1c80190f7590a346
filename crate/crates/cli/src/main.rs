use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use ccflow::analysis::mc_analyze;
use ccflow::fptd::{mc_first_passage_risk, solve_volterra};
use ccflow::optimizer::{optimize, scc_bound, ConstraintKind, OptResult, Problem};
use ccflow::scenario::Scenario;
use ccflow::validation::validate_scenario;

#[derive(Parser)]
#[command(name = "ccflow", version, about = "Chance-constrained inflow control on supply networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Scenario file, or the name of a bundled scenario
    #[arg(long)]
    scenario: String,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Divides Δx and Δt by this factor
    #[arg(long, default_value_t = 1)]
    refine: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the network under the initial controls
    Simulate(Common),
    /// Solve the control problem
    Optimize(Common),
    /// First-passage density and risk for the scenario's boundary
    Fptd {
        #[command(flatten)]
        common: Common,
        /// Also estimate the risk by plain Monte Carlo
        #[arg(long)]
        mc: bool,
    },
    /// Compare against closed-form and finite-difference oracles
    Validate(Common),
    /// Hit/save path analysis of the optimized supply
    McAnalyze {
        #[command(flatten)]
        common: Common,
        /// Number of sampled paths (defaults to the scenario's, else 1000)
        #[arg(long)]
        paths: Option<usize>,
    },
}

enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Simulate(c) => simulate(&c),
        Command::Optimize(c) => run_optimize(&c),
        Command::Fptd { common, mc } => fptd(&common, mc),
        Command::Validate(c) => validate(&c),
        Command::McAnalyze { common, paths } => mc(&common, paths),
    }
}

fn load(c: &Common) -> Result<Scenario> {
    let mut s = Scenario::load(&c.scenario).with_context(|| format!("loading scenario `{}`", c.scenario))?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(s)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_summary(dir: &Path, summary: &Value) -> Result<()> {
    let mut w = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)?;
    Ok(())
}

/// `t,S,mean,bound[,pressure]` on the simulation grid.
fn write_supply(dir: &Path, problem: &Problem, times: &[f64], supply: &[f64], pressure: Option<&[f64]>) -> Result<()> {
    let bound = if problem.constraint.kind == ConstraintKind::Scc {
        scc_bound(&problem.demand, &problem.constraint, times)?
    } else {
        vec![None; times.len()]
    };
    let mut w = create(dir, "supply.csv")?;
    write!(w, "t,S,mean,bound")?;
    if pressure.is_some() {
        write!(w, ",pressure")?;
    }
    writeln!(w)?;
    for (n, &t) in times.iter().enumerate() {
        let b = bound[n].map_or(String::new(), |b| b.to_string());
        write!(w, "{t},{},{},{b}", supply[n], problem.demand.mean(t)?)?;
        if let Some(p) = pressure {
            write!(w, ",{}", p[n])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn simulate(c: &Common) -> Result<Outcome> {
    let s = load(c)?;
    let start = Instant::now();
    let problem = s.problem(c.refine)?.prepare()?;
    let traj = problem.simulate(&problem.controls)?;
    let elapsed = start.elapsed().as_secs_f64();
    let net = &problem.network;
    traj.write_csv(net, create(&c.out, "trajectory.csv")?)?;
    problem.controls.write_csv(create(&c.out, "controls.csv")?)?;
    write_supply(&c.out, &problem, &traj.times, &traj.supply, problem.pressure_series(&traj).as_deref())?;
    let mult = problem.initial_multipliers()?;
    let ev = problem.evaluate(&problem.controls, &mult, false)?;
    write_summary(
        &c.out,
        &json!({
            "scenario": s.name,
            "command": "simulate",
            "objective": ev.cost,
            "scc_violation": ev.scc_violation,
            "pressure_violation": ev.pressure_violation,
            "newton_iterations": traj.newton_iterations.iter().sum::<usize>(),
            "diagnostics": traj.diagnostics,
            "timings": { "simulate_s": elapsed },
        }),
    )?;
    for d in &traj.diagnostics {
        eprintln!("warning: {d}");
    }
    println!("simulated {} levels; wrote {}", traj.times.len(), c.out.display());
    Ok(Outcome::Ok)
}

fn write_opt(dir: &Path, problem: &Problem, res: &OptResult) -> Result<()> {
    res.controls.write_csv(create(dir, "controls.csv")?)?;
    res.write_trace_csv(create(dir, "trace.csv")?)?;
    let traj = &res.trajectory;
    write_supply(dir, problem, &traj.times, &traj.supply, problem.pressure_series(traj).as_deref())?;
    traj.write_csv(&problem.network, create(dir, "trajectory.csv")?)?;
    Ok(())
}

fn opt_summary(name: &str, res: &OptResult, elapsed: f64) -> Value {
    json!({
        "scenario": name,
        "command": "optimize",
        "objective": res.objective,
        "converged": res.converged,
        "reason": res.reason,
        "iterations": res.trace.len(),
        "max_violation": res.max_violation,
        "jcc_risk": res.jcc_risk,
        "timings": { "optimize_s": elapsed },
    })
}

fn run_optimize(c: &Common) -> Result<Outcome> {
    let s = load(c)?;
    let problem = s.problem(c.refine)?.prepare()?;
    let start = Instant::now();
    let res = optimize(&problem)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_opt(&c.out, &problem, &res)?;
    write_summary(&c.out, &opt_summary(&s.name, &res, elapsed))?;
    println!(
        "objective {:.6e}, converged: {} ({}), max violation {:.2e}{}",
        res.objective.total,
        res.converged,
        res.reason,
        res.max_violation,
        res.jcc_risk.map_or(String::new(), |r| format!(", risk {r:.5}"))
    );
    Ok(Outcome::Ok)
}

fn fptd(c: &Common, with_mc: bool) -> Result<Outcome> {
    let s = load(c)?;
    let spec = s.fptd.context("scenario has no [fptd] section")?;
    let boundary = s.fptd_boundary()?;
    let dt = spec.dt / c.refine.max(1) as f64;
    let start = Instant::now();
    let res = solve_volterra(&s.demand, &boundary, dt, spec.t_end)?;
    let fptd_s = start.elapsed().as_secs_f64();
    res.write_csv(create(&c.out, "fptd.csv")?)?;
    let mut summary = json!({
        "scenario": s.name,
        "command": "fptd",
        "dt": dt,
        "risk": res.risk,
        "clamped_nodes": res.clamped,
        "flagged": res.flagged,
        "timings": { "fptd_s": fptd_s },
    });
    let mut ok = true;
    if let Some(theta) = spec.theta {
        summary["theta"] = json!(theta);
        summary["feasible"] = json!(res.risk <= theta);
    }
    println!("risk {:.6} (dt = {dt})", res.risk);
    if with_mc {
        let paths = spec.mc_paths.unwrap_or(10_000);
        let mc_dt = spec.mc_dt.unwrap_or(dt);
        let start = Instant::now();
        let mc = mc_first_passage_risk(&s.demand, &boundary, mc_dt, spec.t_end, paths, s.seed)?;
        let mc_s = start.elapsed().as_secs_f64();
        summary["mc_risk"] = json!(mc);
        summary["mc_paths"] = json!(paths);
        summary["mc_dt"] = json!(mc_dt);
        summary["timings"]["mc_s"] = json!(mc_s);
        println!("monte carlo risk {mc:.6} ({paths} paths, dt = {mc_dt})");
        ok &= mc.is_finite();
    }
    write_summary(&c.out, &summary)?;
    Ok(if ok { Outcome::Ok } else { Outcome::Failed })
}

fn validate(c: &Common) -> Result<Outcome> {
    let s = load(c)?;
    let start = Instant::now();
    let report = validate_scenario(&s, c.refine)?;
    let elapsed = start.elapsed().as_secs_f64();
    for check in &report.checks {
        println!(
            "{} {}: {:.3e} (threshold {:.3e}) {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.value,
            check.threshold,
            check.detail
        );
    }
    write_summary(
        &c.out,
        &json!({
            "scenario": s.name,
            "command": "validate",
            "passed": report.passed(),
            "checks": report.checks,
            "timings": { "validate_s": elapsed },
        }),
    )?;
    Ok(if report.passed() { Outcome::Ok } else { Outcome::Failed })
}

fn mc(c: &Common, paths: Option<usize>) -> Result<Outcome> {
    let s = load(c)?;
    let problem = s.problem(c.refine)?.prepare()?;
    let start = Instant::now();
    let res = optimize(&problem)?;
    let opt_s = start.elapsed().as_secs_f64();
    write_opt(&c.out, &problem, &res)?;
    let n = paths.or(s.mc.map(|m| m.paths)).unwrap_or(1000);
    let start = Instant::now();
    let traj = &res.trajectory;
    let analysis = mc_analyze(&problem.demand, &traj.times, &traj.supply, n, s.seed)?;
    let mc_s = start.elapsed().as_secs_f64();
    analysis.write_csv(create(&c.out, "mc.csv")?)?;
    analysis.write_first_passage_csv(create(&c.out, "first_passage.csv")?)?;
    let last = traj.times.len() - 1;
    let mut summary = opt_summary(&s.name, &res, opt_s);
    summary["command"] = json!("mc-analyze");
    summary["mc_paths"] = json!(n);
    summary["hit_fraction"] = json!(analysis.hit_fraction(last));
    summary["timings"]["mc_s"] = json!(mc_s);
    write_summary(&c.out, &summary)?;
    println!(
        "hit fraction at t = {}: {:.4} over {n} paths",
        traj.times[last],
        analysis.hit_fraction(last)
    );
    Ok(Outcome::Ok)
}
