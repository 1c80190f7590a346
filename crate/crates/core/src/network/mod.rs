//! Hyperbolic balance laws on directed networks, discretized with the
//! implicit box scheme.

mod model;
mod system;
mod trajectory;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use model::EdgeModel;
pub use system::{adjoint_sensitivities, ibox_step, steady_state, StepSolver};
pub use trajectory::{pressure_at, simulate, supply_at_demand, InitialData, Trajectory, VertexSeries};
pub(crate) use trajectory::{level_controls, supply_index};

use crate::control::Channel;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub name: String,
    pub from: String,
    pub to: String,
    pub a: f64,
    pub b: f64,
    pub cells: usize,
    pub model: EdgeModel,
}

impl Edge {
    pub fn dx(&self) -> f64 {
        (self.b - self.a) / self.cells as f64
    }

    pub fn node_x(&self, j: usize) -> f64 {
        self.a + j as f64 * self.dx()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingSpec {
    /// Equal voltage (pressure) at all adjacent traces and conservation of
    /// current (mass). For advection chains: flux continuity.
    Kirchhoff,
    /// `p_out = p_in + u_compr` for every outgoing edge, mass conservation.
    Compressor,
    /// Equal pressure, `q_in − q_out = scale · u`.
    Withdrawal { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Density,
    Flow,
    Pressure,
    Voltage,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryValue {
    /// Driven by the inflow control.
    Control,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub quantity: Quantity,
    pub value: BoundaryValue,
}

/// Gas-to-power conversion `ε(S) = a0 + a1 S + a2 S²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversion {
    #[serde(default)]
    pub a0: f64,
    #[serde(default = "unit")]
    pub a1: f64,
    #[serde(default)]
    pub a2: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for Conversion {
    fn default() -> Self {
        Conversion {
            a0: 0.0,
            a1: 1.0,
            a2: 0.0,
        }
    }
}

impl Conversion {
    pub fn withdrawal(&self, supply: f64) -> f64 {
        self.a0 + self.a1 * supply + self.a2 * supply * supply
    }

    /// Supply `S ≥ 0` with `ε(S) = u` on the branch where `ε` increases.
    pub fn supply(&self, u: f64) -> Result<f64> {
        let disc = self.a1 * self.a1 - 4.0 * self.a2 * (self.a0 - u);
        if disc < 0.0 {
            return Err(Error::Conversion(u));
        }
        let den = self.a1 + disc.sqrt();
        if den <= 0.0 {
            return Err(Error::Conversion(u));
        }
        let s = 2.0 * (u - self.a0) / den;
        if s < -1e-12 {
            return Err(Error::Conversion(u));
        }
        Ok(s.max(0.0))
    }

    /// `dS/du` at supply `s`.
    pub fn supply_derivative(&self, s: f64) -> f64 {
        1.0 / (self.a1 + 2.0 * self.a2 * s)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub inflow_vertex: String,
    pub demand_vertex: String,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub couplings: BTreeMap<String, CouplingSpec>,
    #[serde(default)]
    pub left: Vec<BoundarySpec>,
    #[serde(default)]
    pub right: Vec<BoundarySpec>,
    /// Gas networks read the supply off the withdrawal control through ε.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion: Option<Conversion>,
    /// Model seconds per scenario time unit.
    #[serde(default = "one")]
    pub time_scale: f64,
    /// Pressure unit of boundary values, couplings and bounds, in model units.
    #[serde(default = "one")]
    pub pressure_unit: f64,
}

/// Position of every unknown in the global state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    offsets: Vec<usize>,
    comps: Vec<usize>,
    cells: Vec<usize>,
    len: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, edge: usize, node: usize, comp: usize) -> usize {
        self.offsets[edge] + node * self.comps[edge] + comp
    }

    pub fn components(&self, edge: usize) -> usize {
        self.comps[edge]
    }

    pub fn cells(&self, edge: usize) -> usize {
        self.cells[edge]
    }

    pub fn n_edges(&self) -> usize {
        self.offsets.len()
    }

    /// `(comp1, comp2)` at a node; `comp2` is zero for scalar models.
    pub fn node(&self, q: &[f64], edge: usize, node: usize) -> [f64; 2] {
        let i = self.index(edge, node, 0);
        if self.comps[edge] == 2 {
            [q[i], q[i + 1]]
        } else {
            [q[i], 0.0]
        }
    }
}

/// One end of an edge meeting a vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Trace {
    pub edge: usize,
    pub node: usize,
    pub incoming: bool,
}

impl Network {
    pub fn vertices(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let names = std::iter::once(&self.inflow_vertex)
            .chain(self.edges.iter().flat_map(|e| [&e.from, &e.to]))
            .chain(std::iter::once(&self.demand_vertex));
        for v in names {
            if seen.insert(v.clone()) {
                out.push(v.clone());
            }
        }
        out
    }

    pub fn edge_index(&self, name: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.name == name)
    }

    pub fn incoming(&self, v: &str) -> Vec<usize> {
        (0..self.edges.len()).filter(|&i| self.edges[i].to == v).collect()
    }

    pub fn outgoing(&self, v: &str) -> Vec<usize> {
        (0..self.edges.len()).filter(|&i| self.edges[i].from == v).collect()
    }

    /// Traces at `v`: incoming edges at their right end, then outgoing edges
    /// at their left end.
    pub(crate) fn traces(&self, v: &str) -> Vec<Trace> {
        let mut t: Vec<Trace> = self
            .incoming(v)
            .into_iter()
            .map(|e| Trace {
                edge: e,
                node: self.edges[e].cells,
                incoming: true,
            })
            .collect();
        t.extend(self.outgoing(v).into_iter().map(|e| Trace {
            edge: e,
            node: 0,
            incoming: false,
        }));
        t
    }

    pub fn model(&self) -> &EdgeModel {
        &self.edges[0].model
    }

    pub fn is_gas(&self) -> bool {
        matches!(self.model(), EdgeModel::Euler { .. })
    }

    pub fn is_linear(&self) -> bool {
        self.model().is_linear()
    }

    /// Edge entering the demand vertex.
    pub fn supply_edge(&self) -> usize {
        self.incoming(&self.demand_vertex)[0]
    }

    pub fn conversion(&self) -> Conversion {
        self.conversion.unwrap_or_default()
    }

    pub fn layout(&self) -> Layout {
        let mut offsets = Vec::with_capacity(self.edges.len());
        let mut comps = Vec::with_capacity(self.edges.len());
        let mut cells = Vec::with_capacity(self.edges.len());
        let mut len = 0;
        for e in &self.edges {
            offsets.push(len);
            let c = e.model.components();
            comps.push(c);
            cells.push(e.cells);
            len += (e.cells + 1) * c;
        }
        Layout {
            offsets,
            comps,
            cells,
            len,
        }
    }

    /// Controls that enter the network equations.
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        let inflow_bc = self
            .left
            .iter()
            .chain(&self.right)
            .any(|b| b.value == BoundaryValue::Control);
        let withdrawal = self
            .couplings
            .values()
            .any(|c| matches!(c, CouplingSpec::Withdrawal { .. }));
        if inflow_bc || withdrawal {
            out.push(Channel::Inflow);
        }
        if self.couplings.values().any(|c| *c == CouplingSpec::Compressor) {
            out.push(Channel::Compressor);
        }
        out
    }

    /// Earliest time at which inflow reaches the demand vertex, for linear
    /// models: the shortest path in travel time `(b − a) / speed`.
    pub fn first_arrival(&self) -> Option<f64> {
        if !self.is_linear() {
            return None;
        }
        let vertices = self.vertices();
        let mut best: BTreeMap<&str, f64> = vertices.iter().map(|v| (v.as_str(), f64::INFINITY)).collect();
        best.insert(&self.inflow_vertex, 0.0);
        // Bellman-Ford; the graphs here are tiny
        for _ in 0..vertices.len() {
            for e in &self.edges {
                let travel = (e.b - e.a) / e.model.max_speed([0.0, 0.0]);
                let cand = best[e.from.as_str()] + travel;
                if cand < best[e.to.as_str()] {
                    best.insert(&e.to, cand);
                }
            }
        }
        Some(best[self.demand_vertex.as_str()])
    }

    pub fn validate(&self) -> Result<()> {
        let net = |msg: String| Error::Network(msg);
        if self.edges.is_empty() {
            return Err(net("network has no edges".into()));
        }
        if !(self.time_scale > 0.0) || !(self.pressure_unit > 0.0) {
            return Err(invalid("time_scale and pressure_unit must be positive"));
        }
        let mut names = BTreeSet::new();
        let family = self.model().family();
        for e in &self.edges {
            if !names.insert(&e.name) {
                return Err(net(format!("duplicate edge name `{}`", e.name)));
            }
            if !(e.b > e.a) || e.cells == 0 {
                return Err(net(format!("edge `{}` needs b > a and at least one cell", e.name)));
            }
            if e.from == e.to {
                return Err(net(format!("edge `{}` is a loop", e.name)));
            }
            e.model.validate()?;
            if e.model.family() != family {
                return Err(net("all edges must carry the same kind of model".into()));
            }
            if let EdgeModel::Advection { speed, .. } = e.model {
                if speed <= 0.0 {
                    return Err(net(format!("advection edge `{}` must transport towards its head", e.name)));
                }
            }
        }
        let (vin, vd) = (&self.inflow_vertex, &self.demand_vertex);
        if vin == vd {
            return Err(net("inflow and demand vertex coincide".into()));
        }
        if !self.incoming(vin).is_empty() || self.outgoing(vin).len() != 1 {
            return Err(net(format!("inflow vertex `{vin}` needs exactly one outgoing and no incoming edge")));
        }
        if !self.outgoing(vd).is_empty() || self.incoming(vd).len() != 1 {
            return Err(net(format!("demand vertex `{vd}` needs exactly one incoming and no outgoing edge")));
        }
        let vertices = self.vertices();
        for v in &vertices {
            let boundary = v == vin || v == vd;
            let spec = self.couplings.get(v);
            if boundary && spec.is_some() {
                return Err(net(format!("boundary vertex `{v}` cannot carry a coupling")));
            }
            if !boundary && spec.is_none() {
                return Err(net(format!("interior vertex `{v}` has no coupling")));
            }
            if boundary {
                continue;
            }
            let (n_in, n_out) = (self.incoming(v).len(), self.outgoing(v).len());
            if n_in == 0 || n_out == 0 {
                return Err(net(format!("interior vertex `{v}` must have incoming and outgoing edges")));
            }
            match spec.unwrap() {
                CouplingSpec::Kirchhoff => {
                    if family == 0 && (n_in != 1 || n_out != 1) {
                        return Err(net(format!("advection vertex `{v}` must join exactly two edges")));
                    }
                }
                CouplingSpec::Compressor => {
                    if family != 2 || n_in != 1 {
                        return Err(net(format!("compressor `{v}` needs a gas network and one incoming edge")));
                    }
                }
                CouplingSpec::Withdrawal { scale } => {
                    if family != 2 || n_in != 1 || n_out != 1 || !scale.is_finite() {
                        return Err(net(format!("withdrawal `{v}` needs a gas network and one edge in and out")));
                    }
                }
            }
        }
        for v in self.couplings.keys() {
            if !vertices.contains(v) {
                return Err(net(format!("coupling refers to unknown vertex `{v}`")));
            }
        }
        for b in self.left.iter().chain(&self.right) {
            let ok = match family {
                0 => b.quantity == Quantity::Density,
                1 => matches!(b.quantity, Quantity::Voltage | Quantity::Current),
                _ => matches!(b.quantity, Quantity::Density | Quantity::Flow | Quantity::Pressure),
            };
            if !ok {
                return Err(net(format!("boundary quantity {:?} does not fit the edge model", b.quantity)));
            }
        }
        if self.is_gas() {
            if self.left.iter().chain(&self.right).any(|b| b.value == BoundaryValue::Control) {
                return Err(net("gas networks take the inflow control at the withdrawal vertex".into()));
            }
        } else if self.conversion.is_some() {
            return Err(net("a conversion function only applies to gas networks".into()));
        }
        self.check_connected(&vertices)?;

        let layout = self.layout();
        let boxes: usize = self.edges.iter().map(|e| e.cells * e.model.components()).sum();
        let closures: usize = vertices
            .iter()
            .filter(|v| self.couplings.contains_key(*v))
            .map(|v| {
                if family == 0 {
                    1
                } else {
                    self.incoming(v).len() + self.outgoing(v).len()
                }
            })
            .sum();
        let equations = boxes + closures + self.left.len() + self.right.len();
        if equations != layout.len() {
            return Err(net(format!(
                "boundary and coupling conditions close {equations} equations for {} unknowns",
                layout.len()
            )));
        }
        Ok(())
    }

    fn check_connected(&self, vertices: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.inflow_vertex.as_str()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v) {
                continue;
            }
            for e in &self.edges {
                if e.from == v {
                    stack.push(&e.to);
                }
                if e.to == v {
                    stack.push(&e.from);
                }
            }
        }
        if seen.len() != vertices.len() {
            return Err(Error::Network("network is not connected".into()));
        }
        Ok(())
    }

    /// The same network with every edge's cell count multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Network {
        let mut out = self.clone();
        for e in &mut out.edges {
            e.cells *= factor;
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn single_advection(speed: f64, source: f64, cells: usize) -> Network {
        Network {
            inflow_vertex: "in".into(),
            demand_vertex: "out".into(),
            edges: vec![Edge {
                name: "e".into(),
                from: "in".into(),
                to: "out".into(),
                a: 0.0,
                b: 1.0,
                cells,
                model: EdgeModel::Advection { speed, source },
            }],
            couplings: BTreeMap::new(),
            left: vec![BoundarySpec {
                quantity: Quantity::Density,
                value: BoundaryValue::Control,
            }],
            right: vec![],
            conversion: None,
            time_scale: 1.0,
            pressure_unit: 1.0,
        }
    }

    #[test]
    fn conversion_roots() {
        let id = Conversion::default();
        assert_eq!(id.supply(2.5).unwrap(), 2.5);
        let q = Conversion { a0: 0.0, a1: 1.0, a2: 1.0 };
        assert!((q.supply(2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((q.withdrawal(q.supply(7.3).unwrap()) - 7.3).abs() < 1e-12);
        let neg = Conversion { a0: 1.0, a1: 1.0, a2: 1.0 };
        assert!(matches!(neg.supply(0.5), Err(Error::Conversion(_))));
        let concave = Conversion { a0: 0.0, a1: 2.0, a2: -0.5 };
        let s = concave.supply(1.5).unwrap();
        assert!((concave.withdrawal(s) - 1.5).abs() < 1e-12);
        assert!(concave.supply_derivative(s) > 0.0);
    }

    #[test]
    fn equation_count_is_checked() {
        let mut net = single_advection(4.0, 0.0, 5);
        assert!(net.validate().is_ok());
        net.right.push(BoundarySpec {
            quantity: Quantity::Density,
            value: BoundaryValue::Constant(0.0),
        });
        assert!(net.validate().is_err());
    }

    #[test]
    fn rejects_structural_errors() {
        let mut net = single_advection(4.0, 0.0, 5);
        net.edges[0].cells = 0;
        assert!(net.validate().is_err());
        let mut net = single_advection(-4.0, 0.0, 5);
        assert!(net.validate().is_err());
        net = single_advection(4.0, 0.0, 5);
        net.couplings.insert("in".into(), CouplingSpec::Kirchhoff);
        assert!(net.validate().is_err());
        net = single_advection(4.0, 0.0, 5);
        net.conversion = Some(Conversion::default());
        assert!(net.validate().is_err());
    }

    #[test]
    fn first_arrival_of_a_single_edge() {
        let net = single_advection(4.0, 0.0, 5);
        assert_eq!(net.first_arrival(), Some(0.25));
        assert_eq!(net.channels(), vec![Channel::Inflow]);
    }
}
