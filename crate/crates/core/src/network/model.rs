use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-edge balance law `∂t q + ∂x f(q) = s(q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EdgeModel {
    /// `∂t ρ + λ ∂x ρ = s ρ`
    Advection {
        speed: f64,
        #[serde(default)]
        source: f64,
    },
    /// State `(U, I)`: `∂t U + ∂x I / C = −G U / C`, `∂t I + ∂x U / L = −R I / L`.
    Telegrapher {
        resistance: f64,
        inductance: f64,
        capacitance: f64,
        conductance: f64,
    },
    /// State `(ρ, q)` with pressure law `p = d² ρ^β` and pipe friction.
    Euler {
        sound_speed: f64,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default)]
        friction: f64,
        diameter: f64,
    },
}

fn one() -> f64 {
    1.0
}

pub(crate) type Vec2 = [f64; 2];
pub(crate) type Mat2 = [[f64; 2]; 2];

impl EdgeModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EdgeModel::Advection { speed, source } => speed != 0.0 && speed.is_finite() && source.is_finite(),
            EdgeModel::Telegrapher {
                resistance,
                inductance,
                capacitance,
                conductance,
            } => inductance > 0.0 && capacitance > 0.0 && resistance >= 0.0 && conductance >= 0.0,
            EdgeModel::Euler {
                sound_speed,
                beta,
                friction,
                diameter,
            } => sound_speed > 0.0 && beta >= 1.0 && friction >= 0.0 && diameter > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("edge model parameters out of range: {self:?}")))
        }
    }

    pub fn components(&self) -> usize {
        match self {
            EdgeModel::Advection { .. } => 1,
            _ => 2,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, EdgeModel::Euler { .. })
    }

    pub(crate) fn family(&self) -> u8 {
        match self {
            EdgeModel::Advection { .. } => 0,
            EdgeModel::Telegrapher { .. } => 1,
            EdgeModel::Euler { .. } => 2,
        }
    }

    pub fn flux(&self, q: Vec2) -> Vec2 {
        match *self {
            EdgeModel::Advection { speed, .. } => [speed * q[0], 0.0],
            EdgeModel::Telegrapher {
                inductance,
                capacitance,
                ..
            } => [q[1] / capacitance, q[0] / inductance],
            EdgeModel::Euler { .. } => [q[1], self.pressure(q[0]) + q[1] * q[1] / q[0]],
        }
    }

    pub fn flux_jacobian(&self, q: Vec2) -> Mat2 {
        match *self {
            EdgeModel::Advection { speed, .. } => [[speed, 0.0], [0.0, 0.0]],
            EdgeModel::Telegrapher {
                inductance,
                capacitance,
                ..
            } => [[0.0, 1.0 / capacitance], [1.0 / inductance, 0.0]],
            EdgeModel::Euler { .. } => {
                let v = q[1] / q[0];
                [[0.0, 1.0], [self.pressure_derivative(q[0]) - v * v, 2.0 * v]]
            }
        }
    }

    pub fn source(&self, q: Vec2) -> Vec2 {
        match *self {
            EdgeModel::Advection { source, .. } => [source * q[0], 0.0],
            EdgeModel::Telegrapher {
                resistance,
                inductance,
                capacitance,
                conductance,
            } => [-conductance / capacitance * q[0], -resistance / inductance * q[1]],
            EdgeModel::Euler {
                friction, diameter, ..
            } => [0.0, -friction * q[1] * q[1].abs() / (2.0 * diameter * q[0])],
        }
    }

    pub fn source_jacobian(&self, q: Vec2) -> Mat2 {
        match *self {
            EdgeModel::Advection { source, .. } => [[source, 0.0], [0.0, 0.0]],
            EdgeModel::Telegrapher {
                resistance,
                inductance,
                capacitance,
                conductance,
            } => [[-conductance / capacitance, 0.0], [0.0, -resistance / inductance]],
            EdgeModel::Euler {
                friction, diameter, ..
            } => {
                let c = friction / (2.0 * diameter);
                [
                    [0.0, 0.0],
                    [c * q[1] * q[1].abs() / (q[0] * q[0]), -2.0 * c * q[1].abs() / q[0]],
                ]
            }
        }
    }

    /// Largest characteristic speed magnitude at `q`.
    pub fn max_speed(&self, q: Vec2) -> f64 {
        match *self {
            EdgeModel::Advection { speed, .. } => speed.abs(),
            EdgeModel::Telegrapher {
                inductance,
                capacitance,
                ..
            } => 1.0 / (inductance * capacitance).sqrt(),
            EdgeModel::Euler { .. } => (q[1] / q[0]).abs() + self.pressure_derivative(q[0]).sqrt(),
        }
    }

    /// `p(ρ) = d² ρ^β`; zero for non-gas models.
    pub fn pressure(&self, rho: f64) -> f64 {
        match *self {
            EdgeModel::Euler {
                sound_speed, beta, ..
            } => sound_speed * sound_speed * rho.powf(beta),
            _ => 0.0,
        }
    }

    pub fn pressure_derivative(&self, rho: f64) -> f64 {
        match *self {
            EdgeModel::Euler {
                sound_speed, beta, ..
            } => sound_speed * sound_speed * beta * rho.powf(beta - 1.0),
            _ => 0.0,
        }
    }

    /// Density giving pressure `p`.
    pub fn density_for_pressure(&self, p: f64) -> f64 {
        match *self {
            EdgeModel::Euler {
                sound_speed, beta, ..
            } => (p / (sound_speed * sound_speed)).powf(1.0 / beta),
            _ => f64::NAN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gas() -> EdgeModel {
        EdgeModel::Euler {
            sound_speed: 340.0,
            beta: 1.2,
            friction: 0.01,
            diameter: 0.5,
        }
    }

    fn tele() -> EdgeModel {
        EdgeModel::Telegrapher {
            resistance: 0.01,
            inductance: 0.5,
            capacitance: 0.125,
            conductance: 0.01,
        }
    }

    fn fd_check(m: EdgeModel, q: Vec2, f: impl Fn(Vec2) -> Vec2, jac: Mat2) {
        for c in 0..2 {
            let h = 1e-6 * q[c].abs().max(1.0);
            let mut up = q;
            let mut dn = q;
            up[c] += h;
            dn[c] -= h;
            let (fu, fd) = (f(up), f(dn));
            for r in 0..2 {
                let d = (fu[r] - fd[r]) / (2.0 * h);
                assert!(
                    (d - jac[r][c]).abs() <= 1e-6 * (1.0 + d.abs()),
                    "{m:?} [{r}][{c}]: {d} vs {}",
                    jac[r][c]
                );
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for m in [gas(), tele(), EdgeModel::Advection { speed: 4.0, source: -0.1 }] {
            for q in [[40.0, 200.0], [35.0, -80.0], [1.0, 0.5]] {
                fd_check(m, q, |x| m.flux(x), m.flux_jacobian(q));
                fd_check(m, q, |x| m.source(x), m.source_jacobian(q));
            }
        }
    }

    #[test]
    fn pressure_law() {
        let m = EdgeModel::Euler {
            sound_speed: 340.0,
            beta: 1.0,
            friction: 0.0,
            diameter: 1.0,
        };
        assert_eq!(m.pressure(1.0), 115600.0);
        assert!((m.density_for_pressure(m.pressure(37.5)) - 37.5).abs() < 1e-12);
        let g = gas();
        assert!((g.density_for_pressure(g.pressure(12.0)) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn telegrapher_speed() {
        assert_eq!(tele().max_speed([0.0, 0.0]), 4.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(EdgeModel::Advection { speed: 0.0, source: 0.0 }.validate().is_err());
        assert!(EdgeModel::Telegrapher {
            resistance: 0.0,
            inductance: 0.0,
            capacitance: 1.0,
            conductance: 0.0
        }
        .validate()
        .is_err());
        assert!(EdgeModel::Euler {
            sound_speed: 340.0,
            beta: 0.5,
            friction: 0.0,
            diameter: 1.0
        }
        .validate()
        .is_err());
    }
}
