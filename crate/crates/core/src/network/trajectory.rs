use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use super::system::StepSolver;
use super::{EdgeModel, Layout, Network};
use crate::control::{Channel, ControlGrid};
use crate::error::{domain, Error, Result};

type Profile = Arc<dyn Fn(usize, f64) -> [f64; 2] + Send + Sync>;

/// Initial data, sampled pointwise at the grid nodes.
#[derive(Clone)]
pub enum InitialData {
    /// One constant state per edge.
    Uniform(Vec<[f64; 2]>),
    /// `(edge index, x) ↦ state`.
    Profile(Profile),
    /// Steady state of the network for the first control values, reached
    /// from the given per-edge guess.
    Steady { guess: Vec<[f64; 2]> },
    /// A complete state vector in layout order.
    State(Vec<f64>),
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialData::Uniform(v) => f.debug_tuple("Uniform").field(v).finish(),
            InitialData::Profile(_) => f.write_str("Profile"),
            InitialData::Steady { guess } => f.debug_struct("Steady").field("guess", guess).finish(),
            InitialData::State(q) => f.debug_struct("State").field("len", &q.len()).finish(),
        }
    }
}

impl InitialData {
    pub fn profile(f: impl Fn(usize, f64) -> [f64; 2] + Send + Sync + 'static) -> Self {
        InitialData::Profile(Arc::new(f))
    }

    fn sample(net: &Network, f: impl Fn(usize, f64) -> [f64; 2]) -> Vec<f64> {
        let lay = net.layout();
        let mut q = vec![0.0; lay.len()];
        for (ei, e) in net.edges.iter().enumerate() {
            for j in 0..=e.cells {
                let v = f(ei, e.node_x(j));
                for c in 0..lay.components(ei) {
                    q[lay.index(ei, j, c)] = v[c];
                }
            }
        }
        q
    }

    pub fn state(&self, net: &Network, controls: [f64; 2]) -> Result<Vec<f64>> {
        let per_edge = |v: &Vec<[f64; 2]>| -> Result<Vec<f64>> {
            if v.len() != net.edges.len() {
                return Err(domain(format!(
                    "initial data lists {} edges, network has {}",
                    v.len(),
                    net.edges.len()
                )));
            }
            Ok(Self::sample(net, |e, _| v[e]))
        };
        match self {
            InitialData::Uniform(v) => per_edge(v),
            InitialData::Profile(f) => Ok(Self::sample(net, |e, x| f(e, x))),
            InitialData::Steady { guess } => super::steady_state(net, &per_edge(guess)?, controls),
            InitialData::State(q) => Ok(q.clone()),
        }
    }
}

/// A full space-time solution.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `[inflow, compressor]` acting at each level.
    pub controls: Vec<[f64; 2]>,
    pub supply: Vec<f64>,
    pub newton_iterations: Vec<usize>,
    pub diagnostics: Vec<String>,
    pub layout: Layout,
}

pub(crate) fn level_controls(controls: &ControlGrid, t: f64) -> [f64; 2] {
    [controls.value_at(Channel::Inflow, t), controls.value_at(Channel::Compressor, t)]
}

/// Supply at the demand vertex for state `q` and controls `u`.
pub(crate) fn supply_of(net: &Network, lay: &Layout, q: &[f64], u: [f64; 2]) -> Result<f64> {
    if net.is_gas() {
        return net.conversion().supply(u[Channel::Inflow.index()]);
    }
    Ok(q[supply_index(net, lay)])
}

/// State index read as supply by linear networks.
pub(crate) fn supply_index(net: &Network, lay: &Layout) -> usize {
    let e = net.supply_edge();
    let comp = match net.edges[e].model {
        EdgeModel::Telegrapher { .. } => 1,
        _ => 0,
    };
    lay.index(e, lay.cells(e), comp)
}

fn step_count(t0: f64, t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end > t0) {
        return Err(domain(format!("need dt > 0 and t_end > t0, got dt = {dt}, [{t0}, {t_end}]")));
    }
    let x = (t_end - t0) / dt;
    if (x - x.round()).abs() > 1e-8 * x.max(1.0) {
        return Err(domain(format!("horizon {} is not a multiple of dt = {dt}", t_end - t0)));
    }
    Ok(x.round() as usize)
}

/// Runs the implicit box scheme from `t0` to `t_end`.
pub fn simulate(
    net: &Network,
    ic: &InitialData,
    controls: &ControlGrid,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    let n = step_count(t0, t_end, dt)?;
    controls.validate()?;
    controls.check_alignment(dt, t_end)?;
    let mut solver = StepSolver::new(net, dt)?;
    let lay = solver.layout().clone();
    let u0 = level_controls(controls, t0);
    let q0 = ic.state(net, u0)?;
    if q0.len() != lay.len() {
        return Err(domain("initial state has the wrong length"));
    }

    let mut diagnostics = Vec::new();
    for (ei, e) in net.edges.iter().enumerate() {
        let speed = (0..=e.cells)
            .map(|j| e.model.max_speed(lay.node(&q0, ei, j)))
            .fold(0.0, f64::max);
        let ratio = speed * dt * net.time_scale / e.dx();
        if ratio < 1.0 {
            diagnostics.push(format!(
                "inverse CFL condition violated on edge `{}`: speed*dt/dx = {ratio:.3} < 1",
                e.name
            ));
        }
    }

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut used = Vec::with_capacity(n + 1);
    let mut supply = Vec::with_capacity(n + 1);
    let mut iterations = Vec::with_capacity(n + 1);
    times.push(t0);
    supply.push(supply_of(net, &lay, &q0, u0)?);
    states.push(q0);
    used.push(u0);
    iterations.push(0);
    for level in 1..=n {
        let t = t0 + level as f64 * dt;
        let u = level_controls(controls, t);
        let (q, its) = solver
            .step(&states[level - 1], u, t)
            .map_err(|e| Error::StepFailure { level, source: Box::new(e) })?;
        supply.push(supply_of(net, &lay, &q, u)?);
        times.push(t);
        states.push(q);
        used.push(u);
        iterations.push(its);
    }
    Ok(Trajectory {
        t0,
        dt,
        times,
        states,
        controls: used,
        supply,
        newton_iterations: iterations,
        diagnostics,
        layout: lay,
    })
}

impl Trajectory {
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let last = *self.times.last().unwrap();
        let slack = 1e-9 * self.dt;
        if t < self.t0 - slack || t > last + slack {
            return Err(domain(format!("time {t} outside the simulated horizon [{}, {last}]", self.t0)));
        }
        let x = ((t - self.t0) / self.dt).clamp(0.0, (self.times.len() - 1) as f64);
        let i = (x.floor() as usize).min(self.times.len().saturating_sub(2));
        Ok((i, x - i as f64))
    }

    fn interpolate(&self, t: f64, f: impl Fn(usize) -> f64) -> Result<f64> {
        let (i, w) = self.locate(t)?;
        if self.times.len() == 1 || w == 0.0 {
            return Ok(f(i));
        }
        Ok((1.0 - w) * f(i) + w * f(i + 1))
    }

    pub fn write_csv<W: std::io::Write>(&self, net: &Network, mut w: W) -> std::io::Result<()> {
        writeln!(w, "edge,x,t,comp1,comp2")?;
        for (t, q) in self.times.iter().zip(&self.states) {
            for (ei, e) in net.edges.iter().enumerate() {
                for j in 0..=e.cells {
                    let v = self.layout.node(q, ei, j);
                    writeln!(w, "{},{},{t},{},{}", e.name, e.node_x(j), v[0], v[1])?;
                }
            }
        }
        Ok(())
    }

    /// Per-vertex potential (pressure, voltage or density) and net inflow
    /// over time.
    pub fn vertex_series(&self, net: &Network) -> Vec<VertexSeries> {
        net.vertices()
            .into_iter()
            .map(|v| {
                let traces = net.traces(&v);
                let mut potential = Vec::with_capacity(self.times.len());
                let mut inflow = Vec::with_capacity(self.times.len());
                for q in &self.states {
                    let first = traces[0];
                    let node = self.layout.node(q, first.edge, first.node);
                    let model = &net.edges[first.edge].model;
                    potential.push(match model {
                        EdgeModel::Euler { .. } => model.pressure(node[0]) / net.pressure_unit,
                        _ => node[0],
                    });
                    let mut flow = 0.0;
                    for tr in &traces {
                        let node = self.layout.node(q, tr.edge, tr.node);
                        let f = match net.edges[tr.edge].model {
                            EdgeModel::Advection { speed, .. } => speed * node[0],
                            _ => node[1],
                        };
                        flow += if tr.incoming { f } else { -f };
                    }
                    inflow.push(flow);
                }
                VertexSeries {
                    vertex: v,
                    potential,
                    net_inflow: inflow,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VertexSeries {
    pub vertex: String,
    pub potential: Vec<f64>,
    pub net_inflow: Vec<f64>,
}

/// Supply `S_u(t)` at the demand vertex, linear in time between levels.
pub fn supply_at_demand(traj: &Trajectory, t: f64) -> Result<f64> {
    traj.interpolate(t, |i| traj.supply[i])
}

/// Pressure `d² ρ^β` at a gas vertex, in model units.
pub fn pressure_at(traj: &Trajectory, net: &Network, vertex: &str, t: f64) -> Result<f64> {
    let traces = net.traces(vertex);
    let tr = *traces
        .first()
        .ok_or_else(|| domain(format!("unknown vertex `{vertex}`")))?;
    let model = &net.edges[tr.edge].model;
    if !matches!(model, EdgeModel::Euler { .. }) {
        return Err(domain(format!("vertex `{vertex}` is not a gas vertex")));
    }
    let i = traj.layout.index(tr.edge, tr.node, 0);
    traj.interpolate(t, |k| model.pressure(traj.states[k][i]))
}
