//! Ornstein-Uhlenbeck demand with a time-dependent mean level.
//!
//! ```text
//! dY = κ (μ(t) − Y) dt + σ dW,   Y(t0) = y0
//! ```
//!
//! `Y_t` is Gaussian with mean `m(t) = y0 e^{−κ(t−t0)} + κ ∫ e^{−κ(t−s)} μ(s) ds`
//! and variance `v(t) = σ²/(2κ) (1 − e^{−2κ(t−t0)})`. The covariance factors as
//! `h1(s) h2(t)` for `s ≤ t`, which is what the first-passage solver relies on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::normal;
use crate::quadrature::adaptive_simpson;

/// The mean demand level μ(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanLevel {
    Constant {
        level: f64,
    },
    /// `offset + amplitude · sin(omega · t + phase)`
    Sinusoidal {
        offset: f64,
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Piecewise linear through `(time, value)` knots, clamped outside the table.
    Tabulated { points: Vec<(f64, f64)> },
}

impl MeanLevel {
    pub fn constant(level: f64) -> Self {
        MeanLevel::Constant { level }
    }

    pub fn sinusoidal(offset: f64, amplitude: f64, omega: f64, phase: f64) -> Self {
        MeanLevel::Sinusoidal {
            offset,
            amplitude,
            omega,
            phase,
        }
    }

    pub fn tabulated(points: Vec<(f64, f64)>) -> Result<Self> {
        let level = MeanLevel::Tabulated { points };
        level.validate()?;
        Ok(level)
    }

    pub fn validate(&self) -> Result<()> {
        if let MeanLevel::Tabulated { points } = self {
            if points.is_empty() {
                return Err(invalid("tabulated mean level needs at least one point"));
            }
            if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(invalid("tabulated mean level times must be strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            MeanLevel::Constant { level } => *level,
            MeanLevel::Sinusoidal {
                offset,
                amplitude,
                omega,
                phase,
            } => offset + amplitude * (omega * t + phase).sin(),
            MeanLevel::Tabulated { points } => interpolate(points, t),
        }
    }

    fn knots(&self) -> &[(f64, f64)] {
        match self {
            MeanLevel::Tabulated { points } => points,
            _ => &[],
        }
    }
}

fn interpolate(points: &[(f64, f64)], t: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let idx = points.partition_point(|p| p.0 <= t);
    let (t0, v0) = points[idx - 1];
    let (t1, v1) = points[idx];
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

/// How the drift integral `κ ∫ e^{−κ(t−s)} μ(s) ds` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureMethod {
    ClosedForm,
    AdaptiveSimpson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentQuadrature {
    pub method: QuadratureMethod,
    pub tolerance: f64,
}

impl MomentQuadrature {
    pub fn for_level(level: &MeanLevel) -> Self {
        let method = match level {
            MeanLevel::Tabulated { .. } => QuadratureMethod::AdaptiveSimpson,
            _ => QuadratureMethod::ClosedForm,
        };
        MomentQuadrature {
            method,
            tolerance: 1e-12,
        }
    }
}

/// Scale applied to Φ⁻¹ in the quantile. `Variance` reproduces the literal
/// `m + v·Φ⁻¹(1−θ)` form; `Stddev` is the actual normal quantile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileScale {
    #[default]
    Stddev,
    Variance,
}

/// Covariance factors `h1, h2` with `cov(Y_s, Y_t) = h1(s) h2(t)` for `s ≤ t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovFactors {
    pub h1: f64,
    pub h2: f64,
    pub h1_deriv: f64,
    pub h2_deriv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuProcess {
    pub t0: f64,
    pub y0: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub mean_level: MeanLevel,
    #[serde(default)]
    pub quantile_scale: QuantileScale,
}

impl OuProcess {
    pub fn new(t0: f64, y0: f64, kappa: f64, sigma: f64, mean_level: MeanLevel) -> Result<Self> {
        let p = OuProcess {
            t0,
            y0,
            kappa,
            sigma,
            mean_level,
            quantile_scale: QuantileScale::Stddev,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_quantile_scale(mut self, scale: QuantileScale) -> Self {
        self.quantile_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.t0.is_finite() || !self.y0.is_finite() {
            return Err(invalid("t0 and y0 must be finite"));
        }
        self.mean_level.validate()
    }

    pub fn quadrature(&self) -> MomentQuadrature {
        MomentQuadrature::for_level(&self.mean_level)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t < self.t0 || t.is_nan() {
            return Err(domain(format!("time {t} precedes t0 = {}", self.t0)));
        }
        Ok(())
    }

    /// `κ ∫_s^t e^{−κ(t−u)} μ(u) du`.
    pub fn drift_integral(&self, s: f64, t: f64) -> f64 {
        let k = self.kappa;
        let decay = (-k * (t - s)).exp();
        match &self.mean_level {
            MeanLevel::Constant { level } => level * (1.0 - decay),
            MeanLevel::Sinusoidal {
                offset,
                amplitude,
                omega,
                phase,
            } => {
                let w = *omega;
                let prim = |x: f64| k * (w * x + phase).sin() - w * (w * x + phase).cos();
                offset * (1.0 - decay) + amplitude * k / (k * k + w * w) * (prim(t) - decay * prim(s))
            }
            MeanLevel::Tabulated { .. } => self.drift_integral_quadrature(s, t),
        }
    }

    /// Drift integral by adaptive Simpson, split at the table knots so each
    /// piece has a smooth integrand.
    pub fn drift_integral_quadrature(&self, s: f64, t: f64) -> f64 {
        if t <= s {
            return 0.0;
        }
        let k = self.kappa;
        let tol = self.quadrature().tolerance;
        let integrand = |u: f64| k * (-k * (t - u)).exp() * self.mean_level.value(u);
        let mut cuts = vec![s];
        cuts.extend(
            self.mean_level
                .knots()
                .iter()
                .map(|p| p.0)
                .filter(|&x| x > s && x < t),
        );
        cuts.push(t);
        let pieces = (cuts.len() - 1) as f64;
        cuts.windows(2)
            .map(|w| adaptive_simpson(&integrand, w[0], w[1], tol / pieces))
            .sum()
    }

    pub fn mean(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.mean_unchecked(t))
    }

    pub(crate) fn mean_unchecked(&self, t: f64) -> f64 {
        self.y0 * (-self.kappa * (t - self.t0)).exp() + self.drift_integral(self.t0, t)
    }

    /// `m'(t) = κ (μ(t) − m(t))`.
    pub fn mean_derivative(&self, t: f64) -> Result<f64> {
        let m = self.mean(t)?;
        Ok(self.kappa * (self.mean_level.value(t) - m))
    }

    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.kappa)
    }

    pub fn variance(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.lag_variance(t - self.t0))
    }

    /// Conditional variance after an elapsed time `lag`.
    pub(crate) fn lag_variance(&self, lag: f64) -> f64 {
        -self.stationary_variance() * (-2.0 * self.kappa * lag).exp_m1()
    }

    pub fn covariance(&self, s: f64, t: f64) -> Result<f64> {
        let (s, t) = if s <= t { (s, t) } else { (t, s) };
        self.check_time(s)?;
        let k = self.kappa;
        Ok(self.stationary_variance()
            * ((-k * (t - s)).exp() - (-k * (s + t - 2.0 * self.t0)).exp()))
    }

    pub fn cov_factors(&self, t: f64) -> Result<CovFactors> {
        self.check_time(t)?;
        let k = self.kappa;
        let c = self.stationary_variance();
        let grow = (k * t).exp();
        let shrink = (-k * t).exp();
        Ok(CovFactors {
            h1: grow * (1.0 - (-2.0 * k * (t - self.t0)).exp()),
            h2: c * shrink,
            h1_deriv: k * grow + k * (-k * (t - 2.0 * self.t0)).exp(),
            h2_deriv: -0.5 * self.sigma * self.sigma * shrink,
        })
    }

    /// Mean and variance of `Y_t` given `Y_s = y`.
    pub fn transition_moments(&self, s: f64, y: f64, t: f64) -> Result<(f64, f64)> {
        self.check_time(s)?;
        if s >= t {
            return Err(domain(format!("transition needs s < t, got s = {s}, t = {t}")));
        }
        let decay = (-self.kappa * (t - s)).exp();
        Ok((y * decay + self.drift_integral(s, t), self.lag_variance(t - s)))
    }

    fn quantile_spread(&self, variance: f64) -> f64 {
        match self.quantile_scale {
            QuantileScale::Stddev => variance.sqrt(),
            QuantileScale::Variance => variance,
        }
    }

    /// Level exceeded by `Y_t` with probability `theta`.
    pub fn quantile(&self, t: f64, theta: f64) -> Result<f64> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(domain(format!("risk level must lie in (0, 1), got {theta}")));
        }
        self.check_time(t)?;
        if t == self.t0 {
            return Ok(self.y0);
        }
        let v = self.lag_variance(t - self.t0);
        Ok(self.mean_unchecked(t) + self.quantile_spread(v) * normal::quantile(1.0 - theta))
    }

    /// Precomputed exact one-step transitions on `grid`.
    pub fn stepper(&self, grid: &[f64]) -> Result<ExactStepper> {
        if grid.is_empty() {
            return Err(domain("time grid is empty"));
        }
        if (grid[0] - self.t0).abs() > 1e-12 * (1.0 + self.t0.abs()) {
            return Err(domain(format!("time grid must start at t0 = {}", self.t0)));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("time grid must be strictly increasing"));
        }
        let steps = grid
            .windows(2)
            .map(|w| {
                let lag = w[1] - w[0];
                StepLaw {
                    decay: (-self.kappa * lag).exp(),
                    drift: self.drift_integral(w[0], w[1]),
                    std: self.lag_variance(lag).sqrt(),
                }
            })
            .collect();
        Ok(ExactStepper {
            y0: self.y0,
            steps,
        })
    }

    /// Exact path sampling on `grid`. Path `i` uses its own ChaCha stream so the
    /// result does not depend on how paths are scheduled.
    pub fn sample_paths(&self, grid: &[f64], n_paths: usize, seed: u64) -> Result<PathMatrix> {
        if n_paths == 0 {
            return Err(domain("need at least one path"));
        }
        let stepper = self.stepper(grid)?;
        let n_points = grid.len();
        let mut values = vec![0.0; n_points * n_paths];
        values
            .par_chunks_mut(n_points)
            .enumerate()
            .for_each(|(i, row)| {
                let mut rng = path_rng(seed, i);
                stepper.fill(&mut rng, row);
            });
        Ok(PathMatrix {
            times: grid.to_vec(),
            n_paths,
            values,
        })
    }
}

pub(crate) fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

#[derive(Debug, Clone, Copy)]
struct StepLaw {
    decay: f64,
    drift: f64,
    std: f64,
}

/// Exact Gaussian transitions between consecutive grid points.
#[derive(Debug, Clone)]
pub struct ExactStepper {
    y0: f64,
    steps: Vec<StepLaw>,
}

impl ExactStepper {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn fill<R: rand::Rng>(&self, rng: &mut R, row: &mut [f64]) {
        let mut y = self.y0;
        row[0] = y;
        for (slot, law) in row[1..].iter_mut().zip(&self.steps) {
            let z: f64 = StandardNormal.sample(rng);
            y = y * law.decay + law.drift + law.std * z;
            *slot = y;
        }
    }

    /// Walks one path and returns the first grid index at which `hit` fires.
    pub fn first_index<R: rand::Rng>(
        &self,
        rng: &mut R,
        mut hit: impl FnMut(usize, f64) -> bool,
    ) -> Option<usize> {
        let mut y = self.y0;
        if hit(0, y) {
            return Some(0);
        }
        for (k, law) in self.steps.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            y = y * law.decay + law.drift + law.std * z;
            if hit(k + 1, y) {
                return Some(k + 1);
            }
        }
        None
    }
}

/// Sampled paths, row-major (one row per path).
#[derive(Debug, Clone)]
pub struct PathMatrix {
    pub times: Vec<f64>,
    pub n_paths: usize,
    values: Vec<f64>,
}

impl PathMatrix {
    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.n_points();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_points())
    }

    /// Sample mean and unbiased variance at grid index `k`.
    pub fn moments_at(&self, k: usize) -> (f64, f64) {
        let n = self.n_paths as f64;
        let mean = self.paths().map(|p| p[k]).sum::<f64>() / n;
        let var = self.paths().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, var)
    }
}
