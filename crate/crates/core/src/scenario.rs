//! Scenario files: one TOML document per run.

use serde::{Deserialize, Serialize};

use crate::control::ControlGrid;
use crate::cost::CostWeights;
use crate::demand::OuProcess;
use crate::error::{invalid, Error, Result};
use crate::fptd::Boundary;
use crate::network::{InitialData, Network};
use crate::optimizer::{ChanceConstraintSpec, OptimizerSettings, PressureBound, Problem};

/// Bundled scenarios, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("advect_validate", include_str!("../scenarios/advect_validate.toml")),
    ("tele", include_str!("../scenarios/tele.toml")),
    ("gtp_s", include_str!("../scenarios/gtp_s.toml")),
    ("gtp_l", include_str!("../scenarios/gtp_l.toml")),
    ("table1", include_str!("../scenarios/table1.toml")),
];

/// Free-text unit annotations; they document the file and are not converted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub time: String,
    pub supply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    /// Start of the cost window; defaults to `t0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_star: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub width: f64,
    /// Initial inflow; defaults to the mean demand at `t0`, mapped through
    /// the conversion for gas networks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflow: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflow_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor_max: Option<f64>,
    /// Shrink the cells together with `Δt` under `--refine`. Cells exactly
    /// one time step wide always do.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub follow_grid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// One `[q1, q2]` per edge, in edge order.
    Uniform { values: Vec<[f64; 2]> },
    /// Steady state for the initial controls, from a per-edge guess.
    Steady { guess: Vec<[f64; 2]> },
}

impl InitialSpec {
    pub fn data(&self) -> InitialData {
        match self {
            InitialSpec::Uniform { values } => InitialData::Uniform(values.clone()),
            InitialSpec::Steady { guess } => InitialData::Steady { guess: guess.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryKind {
    Constant { level: f64 },
    /// `m(t) + offset + slope·(t − t0)`.
    MeanOffset { offset: f64, slope: f64 },
    /// The supply produced by the initial controls.
    Supply,
}

/// Settings of the `fptd` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FptdSpec {
    pub boundary: BoundaryKind,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Plain Monte Carlo cross-check: number of paths and sampling step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dt: Option<f64>,
}

/// Settings of the `validate` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSpec {
    /// Number of successive halvings of `Δx` and `Δt`.
    pub refinements: usize,
    /// Bound on the finest-grid control distance relative to the control norm.
    pub relative_tolerance: f64,
    /// Bound on the coupling residuals.
    pub coupling_tolerance: f64,
    /// Bound on the relative gradient error against finite differences.
    pub gradient_tolerance: f64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec {
            refinements: 2,
            relative_tolerance: 0.02,
            coupling_tolerance: 1e-8,
            gradient_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// How ambiguous source values were read.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    pub units: Units,
    pub horizon: Horizon,
    pub demand: OuProcess,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default = "ChanceConstraintSpec::none")]
    pub constraint: ChanceConstraintSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure_bound: Option<PressureBound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<ControlSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<Network>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fptd: Option<FptdSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSpec>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let text = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Scenario(format!("no bundled scenario named `{name}`")))?;
        Self::from_toml(text)
    }

    /// A bundled name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if BUNDLED.iter().any(|(n, _)| *n == name_or_path) {
            return Self::bundled(name_or_path);
        }
        let text = std::fs::read_to_string(name_or_path).map_err(|e| Error::Scenario(format!("{name_or_path}: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.horizon;
        if !(h.dt > 0.0 && h.t_end > h.t0) {
            return Err(invalid(format!("bad horizon: {h:?}")));
        }
        if (self.demand.t0 - h.t0).abs() > 1e-12 * (1.0 + h.t0.abs()) {
            return Err(invalid("demand.t0 must equal horizon.t0"));
        }
        self.demand.validate()?;
        self.weights.validate()?;
        self.constraint.validate(h.t0, h.t_end)?;
        if let Some(net) = &self.network {
            net.validate()?;
            if self.controls.is_none() || self.initial.is_none() {
                return Err(invalid("a network needs [controls] and [initial]"));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<&Network> {
        self.network
            .as_ref()
            .ok_or_else(|| invalid(format!("scenario `{}` has no network", self.name)))
    }

    pub fn t_star(&self) -> f64 {
        self.horizon.t_star.unwrap_or(self.horizon.t0)
    }

    /// Initial control grid following `[controls]`.
    pub fn control_grid(&self) -> Result<ControlGrid> {
        let spec = self
            .controls
            .ok_or_else(|| invalid(format!("scenario `{}` has no controls", self.name)))?;
        let net = self.network()?;
        let h = &self.horizon;
        let inflow = match spec.inflow {
            Some(u) => u,
            None => {
                let m = self.demand.mean(h.t0)?;
                if net.is_gas() {
                    net.conversion().withdrawal(m)
                } else {
                    m
                }
            }
        };
        let has_compressor = net.channels().contains(&crate::control::Channel::Compressor);
        let compressor = has_compressor.then(|| spec.compressor.unwrap_or(0.0));
        let mut grid = ControlGrid::uniform(h.t0, h.t_end, spec.width, inflow, compressor)?;
        grid.inflow_max = spec.inflow_max;
        grid.compressor_max = spec.compressor_max;
        Ok(grid)
    }

    /// The optimization problem, with `Δx` and `Δt` divided by `refine`.
    /// Control cells keep their width unless they follow the grid.
    pub fn problem(&self, refine: usize) -> Result<Problem> {
        let refine = refine.max(1);
        let net = self.network()?.refined(refine);
        let dt = self.horizon.dt / refine as f64;
        let mut controls = self.control_grid()?;
        let spec = self.controls.expect("checked by control_grid");
        if refine > 1 && (spec.follow_grid || (spec.width - self.horizon.dt).abs() <= 1e-12 * spec.width) {
            let width = spec.width / refine as f64;
            let mut fine = ControlGrid::uniform(self.horizon.t0, self.horizon.t_end, width, controls.inflow[0], None)?;
            fine.compressor = controls.compressor.as_ref().map(|c| vec![c[0]; fine.n_cells()]);
            fine.inflow_max = controls.inflow_max;
            fine.compressor_max = controls.compressor_max;
            controls = fine;
        }
        let initial = self.initial.as_ref().expect("checked by validate").data();
        Ok(Problem {
            network: net,
            initial,
            demand: self.demand.clone(),
            weights: self.weights,
            constraint: self.constraint,
            pressure_bound: self.pressure_bound.clone(),
            t0: self.horizon.t0,
            t_end: self.horizon.t_end,
            dt,
            t_star: self.t_star(),
            controls,
            settings: self.optimizer,
        })
    }

    /// The boundary named in `[fptd]`; `supply` runs one simulation.
    pub fn fptd_boundary(&self) -> Result<Boundary> {
        let spec = self
            .fptd
            .ok_or_else(|| invalid(format!("scenario `{}` has no [fptd] section", self.name)))?;
        match spec.boundary {
            BoundaryKind::Constant { level } => Ok(Boundary::constant(level)),
            BoundaryKind::MeanOffset { offset, slope } => Ok(Boundary::mean_offset(&self.demand, offset, slope)),
            BoundaryKind::Supply => {
                let problem = self.problem(1)?.prepare()?;
                let supply = problem.supply_curve(&problem.controls)?;
                Boundary::tabulated(problem.t0, problem.dt, supply)
            }
        }
    }
}
