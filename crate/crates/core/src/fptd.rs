//! First-passage-time density of the demand process across a moving boundary.
//!
//! The density `g` of `τ = inf{t : Y_t > S(t)}` solves the non-singular
//! second-kind Volterra equation
//!
//! ```text
//! g(t) = −2 Ψ(S(t), t | y0, t0) + 2 ∫_{t0}^{t} g(s) Ψ(S(t), t | S(s), s) ds
//! ```
//!
//! which is discretized with a repeated Simpson rule.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::demand::{path_rng, OuProcess};
use crate::error::{domain, Error, Result};
use crate::normal::INV_SQRT_2PI;

/// Slack allowed above 1 for the discrete CDF before it is flagged.
pub const CDF_TOLERANCE: f64 = 1e-3;

const SINGULAR_DENOMINATOR: f64 = 1e-14;

type Curve = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A C¹ boundary `S(t)` with derivative `S'(t)`.
#[derive(Clone)]
pub enum Boundary {
    Analytic { value: Curve, derivative: Curve },
    /// Values on the uniform grid `t0 + k·dt`. Linear interpolation between
    /// nodes; nodal derivatives by central differences (one-sided at the ends).
    Tabulated { t0: f64, dt: f64, values: Vec<f64> },
}

impl fmt::Debug for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Analytic { .. } => f.write_str("Boundary::Analytic"),
            Boundary::Tabulated { t0, dt, values } => f
                .debug_struct("Boundary::Tabulated")
                .field("t0", t0)
                .field("dt", dt)
                .field("len", &values.len())
                .finish(),
        }
    }
}

impl Boundary {
    pub fn analytic(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Boundary::Analytic {
            value: Arc::new(value),
            derivative: Arc::new(derivative),
        }
    }

    pub fn constant(level: f64) -> Self {
        Boundary::analytic(move |_| level, |_| 0.0)
    }

    /// `S(t) = m(t) + offset + slope·(t − t0)`.
    pub fn mean_offset(p: &OuProcess, offset: f64, slope: f64) -> Self {
        let (pv, pd) = (p.clone(), p.clone());
        Boundary::analytic(
            move |t| pv.mean_unchecked(t) + offset + slope * (t - pv.t0),
            move |t| pd.kappa * (pd.mean_level.value(t) - pd.mean_unchecked(t)) + slope,
        )
    }

    pub fn tabulated(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(domain(format!("boundary grid step must be positive, got {dt}")));
        }
        if values.len() < 2 {
            return Err(domain("tabulated boundary needs at least two values"));
        }
        Ok(Boundary::Tabulated { t0, dt, values })
    }

    fn locate(t0: f64, dt: f64, len: usize, t: f64) -> (usize, f64) {
        let x = ((t - t0) / dt).clamp(0.0, (len - 1) as f64);
        let rounded = x.round();
        // snap to nodes so grid-aligned lookups are exact
        let x = if (x - rounded).abs() < 1e-9 { rounded } else { x };
        let i = (x.floor() as usize).min(len - 2);
        (i, x - i as f64)
    }

    fn node_derivative(dt: f64, v: &[f64], i: usize) -> f64 {
        let n = v.len();
        if i == 0 {
            (v[1] - v[0]) / dt
        } else if i == n - 1 {
            (v[n - 1] - v[n - 2]) / dt
        } else {
            (v[i + 1] - v[i - 1]) / (2.0 * dt)
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Boundary::Analytic { value, .. } => value(t),
            Boundary::Tabulated { t0, dt, values } => {
                let (i, w) = Self::locate(*t0, *dt, values.len(), t);
                values[i] + w * (values[i + 1] - values[i])
            }
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Boundary::Analytic { derivative, .. } => derivative(t),
            Boundary::Tabulated { t0, dt, values } => {
                let (i, w) = Self::locate(*t0, *dt, values.len(), t);
                let a = Self::node_derivative(*dt, values, i);
                if w == 0.0 {
                    return a;
                }
                let b = Self::node_derivative(*dt, values, i + 1);
                a + w * (b - a)
            }
        }
    }

    /// The same boundary raised by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        match self {
            Boundary::Analytic { value, derivative } => {
                let value = value.clone();
                Boundary::Analytic {
                    value: Arc::new(move |t| value(t) + delta),
                    derivative: derivative.clone(),
                }
            }
            Boundary::Tabulated { t0, dt, values } => Boundary::Tabulated {
                t0: *t0,
                dt: *dt,
                values: values.iter().map(|v| v + delta).collect(),
            },
        }
    }
}

/// Simpson weight `w_{k,j}` of the Volterra iteration, `1 ≤ j < k`.
pub fn simpson_weight(k: usize, j: usize) -> f64 {
    debug_assert!(j >= 1 && j < k);
    if k.is_multiple_of(2) {
        return if j % 2 == 1 { 4.0 / 3.0 } else { 2.0 / 3.0 };
    }
    let n = (k - 1) / 2;
    if j + 1 >= 2 * n {
        9.0 / 8.0
    } else if j + 2 == 2 * n {
        17.0 / 24.0
    } else if j % 2 == 1 {
        4.0 / 3.0
    } else {
        2.0 / 3.0
    }
}

/// Kernel `Ψ(S(t), t | y, s)`.
///
/// The ratios of the covariance factors are evaluated in their lag form,
/// `κ coth(κ(t−s))` and `κ / sinh(κ(t−s))`, which stays finite for large `κt`.
pub fn psi(p: &OuProcess, b: &Boundary, t: f64, s: f64, y: f64) -> Result<f64> {
    if s < p.t0 || s >= t {
        return Err(domain(format!("kernel needs t0 <= s < t, got s = {s}, t = {t}")));
    }
    let lag = t - s;
    let k = p.kappa;
    let denominator = 2.0 * p.stationary_variance() * (k * lag).sinh();
    if denominator.abs() < SINGULAR_DENOMINATOR {
        return Err(Error::SingularProximity { lag });
    }
    let (cm, cv) = p.transition_moments(s, y, t)?;
    let m_t = p.mean(t)?;
    let dm_t = p.mean_derivative(t)?;
    let m_s = p.mean(s)?;
    let st = b.value(t);
    let bracket = 0.5 * (b.derivative(t) - dm_t) - 0.5 * (st - m_t) * k / (k * lag).tanh()
        + 0.5 * (y - m_s) * k / (k * lag).sinh();
    let z = (st - cm) / cv.sqrt();
    Ok(bracket * INV_SQRT_2PI * (-0.5 * z * z).exp() / cv.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct FptdResult {
    pub t0: f64,
    pub dt: f64,
    /// `t_1 .. t_N`
    pub times: Vec<f64>,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
    pub risk: f64,
    /// Number of negative density values set to zero.
    pub clamped: usize,
    /// Clamp count above 1% of the grid, or CDF above `1 + CDF_TOLERANCE`.
    pub flagged: bool,
}

impl FptdResult {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,g,G")?;
        writeln!(w, "{},0,0", self.t0)?;
        for ((t, g), c) in self.times.iter().zip(&self.density).zip(&self.cdf) {
            writeln!(w, "{t},{g},{c}")?;
        }
        Ok(())
    }
}

fn grid_size(p: &OuProcess, dt: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(domain(format!("step size must be positive, got {dt}")));
    }
    let steps = (t_end - p.t0) / dt;
    let n = steps.round();
    if (steps - n).abs() > 1e-6 * steps.max(1.0) {
        return Err(domain(format!(
            "horizon {} is not a multiple of the step {dt}",
            t_end - p.t0
        )));
    }
    if n < 2.0 {
        return Err(domain("need at least two steps on the first-passage grid"));
    }
    Ok(n as usize)
}

/// Solves the discretized Volterra equation on `t0 + k·dt`, `k = 1..N`.
pub fn solve_volterra(p: &OuProcess, b: &Boundary, dt: f64, t_end: f64) -> Result<FptdResult> {
    let n = grid_size(p, dt, t_end)?;
    let s0 = b.value(p.t0);
    if !(s0 > p.y0) {
        return Err(Error::BoundaryBelowStart {
            boundary: s0,
            start: p.y0,
        });
    }
    let k = p.kappa;
    let times: Vec<f64> = (0..=n).map(|i| p.t0 + i as f64 * dt).collect();
    let m: Vec<f64> = times.iter().map(|&t| p.mean_unchecked(t)).collect();
    let s: Vec<f64> = times.iter().map(|&t| b.value(t)).collect();
    let gap: Vec<f64> = s.iter().zip(&m).map(|(s, m)| s - m).collect();
    // (S'(t) − m'(t)) / 2
    let slope: Vec<f64> = times
        .iter()
        .zip(&m)
        .map(|(&t, &mt)| 0.5 * (b.derivative(t) - k * (p.mean_level.value(t) - mt)))
        .collect();

    // Everything that depends on the lag t_k − t_j only.
    let c = p.stationary_variance();
    if 2.0 * c * (k * dt).sinh() < SINGULAR_DENOMINATOR {
        return Err(Error::SingularProximity { lag: dt });
    }
    let mut decay = vec![0.0; n + 1];
    let mut coth = vec![0.0; n + 1];
    let mut csch = vec![0.0; n + 1];
    let mut inv_sd = vec![0.0; n + 1];
    for d in 1..=n {
        let x = k * d as f64 * dt;
        decay[d] = (-x).exp();
        coth[d] = k / x.tanh();
        csch[d] = k / x.sinh();
        inv_sd[d] = 1.0 / p.lag_variance(d as f64 * dt).sqrt();
    }

    let mut g = vec![0.0; n + 1];
    let mut clamped = 0;
    for kk in 1..=n {
        // Ψ(t_k | y0, t0): the start sits on the mean, so the third term drops.
        let z = gap[kk] * inv_sd[kk];
        let dens = INV_SQRT_2PI * inv_sd[kk] * (-0.5 * z * z).exp();
        let mut val = -2.0 * (slope[kk] - 0.5 * gap[kk] * coth[kk]) * dens;
        if kk >= 2 {
            let (sk, gk, ak) = (s[kk], gap[kk], slope[kk]);
            let mk = m[kk];
            let mut acc = 0.0;
            for j in 1..kk {
                let gj = g[j];
                if gj == 0.0 {
                    continue;
                }
                let d = kk - j;
                let cm = mk + decay[d] * gap[j];
                let z = (sk - cm) * inv_sd[d];
                let dens = INV_SQRT_2PI * inv_sd[d] * (-0.5 * z * z).exp();
                let kernel = (ak - 0.5 * gk * coth[d] + 0.5 * gap[j] * csch[d]) * dens;
                acc += simpson_weight(kk, j) * gj * kernel;
            }
            val += 2.0 * dt * acc;
        }
        if val < 0.0 {
            clamped += 1;
            val = 0.0;
        }
        g[kk] = val;
    }

    let mut cdf = Vec::with_capacity(n);
    let mut total = 0.0;
    for kk in 1..=n {
        total += 0.5 * dt * (g[kk - 1] + g[kk]);
        cdf.push(total);
    }
    let risk = total;
    let flagged = clamped * 100 > n || risk > 1.0 + CDF_TOLERANCE;
    Ok(FptdResult {
        t0: p.t0,
        dt,
        times: times[1..].to_vec(),
        density: g[1..].to_vec(),
        cdf,
        risk,
        clamped,
        flagged,
    })
}

/// Terminal risk and the feasibility test `risk ≤ θ`.
pub fn risk_level(
    p: &OuProcess,
    b: &Boundary,
    dt: f64,
    t_end: f64,
    theta: f64,
) -> Result<(f64, bool)> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(domain(format!("risk level must lie in (0, 1), got {theta}")));
    }
    let res = solve_volterra(p, b, dt, t_end)?;
    Ok((res.risk, res.risk <= theta))
}

/// Fraction of exactly sampled paths that exceed `S` at some grid point of
/// `t0 + k·dt ≤ t_end`.
pub fn mc_first_passage_risk(
    p: &OuProcess,
    b: &Boundary,
    dt: f64,
    t_end: f64,
    n_paths: usize,
    seed: u64,
) -> Result<f64> {
    if n_paths == 0 {
        return Err(domain("need at least one path"));
    }
    let n = grid_size(p, dt, t_end).or_else(|_| {
        if t_end > p.t0 && dt > 0.0 {
            Ok(((t_end - p.t0) / dt).floor() as usize)
        } else {
            Err(domain("empty sampling horizon"))
        }
    })?;
    let grid: Vec<f64> = (0..=n).map(|i| p.t0 + i as f64 * dt).collect();
    let level: Vec<f64> = grid.iter().map(|&t| b.value(t)).collect();
    let stepper = p.stepper(&grid)?;
    let hits: usize = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            stepper
                .first_index(&mut rng, |k, y| y > level[k])
                .is_some() as usize
        })
        .sum();
    Ok(hits as f64 / n_paths as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::MeanLevel;

    const HORIZON: f64 = 4.0 * 3600.0;

    fn table1() -> (OuProcess, Boundary) {
        let p = OuProcess::new(
            0.0,
            0.8,
            1.0 / 3600.0,
            0.003,
            MeanLevel::sinusoidal(0.7, 0.3, std::f64::consts::PI / 7200.0, 0.0),
        )
        .unwrap();
        let b = Boundary::mean_offset(&p, 0.2, 0.25 / HORIZON);
        (p, b)
    }

    #[test]
    fn weight_table() {
        // even rows alternate 4/3, 2/3
        assert_eq!(simpson_weight(6, 1), 4.0 / 3.0);
        assert_eq!(simpson_weight(6, 4), 2.0 / 3.0);
        assert_eq!(simpson_weight(6, 5), 4.0 / 3.0);
        // row 3 only has the 3/8 tail
        assert_eq!(simpson_weight(3, 1), 9.0 / 8.0);
        assert_eq!(simpson_weight(3, 2), 9.0 / 8.0);
        // row 7: n = 3
        let row: Vec<f64> = (1..7).map(|j| simpson_weight(7, j)).collect();
        assert_eq!(row, vec![4.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0, 17.0 / 24.0, 9.0 / 8.0, 9.0 / 8.0]);
    }

    #[test]
    fn weights_integrate_polynomials() {
        // Σ_{j=0}^{k} w_{k,j} f(t_j) with the implicit end weights reproduces ∫ f.
        for k in 4..12usize {
            let end = if k % 2 == 0 { 1.0 / 3.0 } else { 3.0 / 8.0 };
            let interior: f64 = (1..k).map(|j| simpson_weight(k, j) * (j as f64).powi(2)).sum();
            let quad = interior + end * (k as f64).powi(2);
            let exact = (k as f64).powi(3) / 3.0;
            assert!((quad - exact).abs() < 1e-9, "k={k}: {quad} vs {exact}");
        }
    }

    #[test]
    fn lag_form_matches_covariance_factor_ratios() {
        let (p, _) = table1();
        for &(s, t) in &[(60.0, 120.0), (600.0, 7200.0), (3000.0, 14400.0)] {
            let fs = p.cov_factors(s).unwrap();
            let ft = p.cov_factors(t).unwrap();
            let den = ft.h1 * fs.h2 - ft.h2 * fs.h1;
            let r1 = (ft.h1_deriv * fs.h2 - ft.h2_deriv * fs.h1) / den;
            let r2 = (ft.h2_deriv * ft.h1 - ft.h2 * ft.h1_deriv) / den;
            let tau = t - s;
            let k = p.kappa;
            assert!((r1 - k / (k * tau).tanh()).abs() < 1e-9 * r1.abs());
            assert!((r2 + k / (k * tau).sinh()).abs() < 1e-9 * r2.abs());
            let gm_var = ft.h2 * (ft.h1 * fs.h2 - fs.h1 * ft.h2) / fs.h2;
            let (_, cv) = p.transition_moments(s, 0.9, t).unwrap();
            assert!((gm_var - cv).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_is_finite_on_the_grid_and_vanishes_far_away() {
        let (p, b) = table1();
        for j in 0..20 {
            let s = j as f64 * 600.0;
            for d in [60.0, 480.0, 2400.0] {
                let t = s + d;
                let v = psi(&p, &b, t, s, b.value(s)).unwrap();
                assert!(v.is_finite());
            }
        }
        let far = Boundary::mean_offset(&p, 50.0 * p.stationary_variance().sqrt(), 0.0);
        assert_eq!(psi(&p, &far, 7200.0, 0.0, 0.8).unwrap(), 0.0);
        assert!(psi(&p, &b, 10.0, 10.0, 1.0).is_err());
    }

    #[test]
    fn singular_proximity_is_reported() {
        let (p, b) = table1();
        match psi(&p, &b, 1e-9, 0.0, 0.8) {
            Err(Error::SingularProximity { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn boundary_below_start_is_rejected() {
        let (p, _) = table1();
        let low = Boundary::constant(0.5);
        assert!(matches!(
            solve_volterra(&p, &low, 60.0, HORIZON),
            Err(Error::BoundaryBelowStart { .. })
        ));
    }

    #[test]
    fn table1_coarse_step() {
        let (p, b) = table1();
        let res = solve_volterra(&p, &b, 480.0, HORIZON).unwrap();
        assert!((res.risk - 0.1481).abs() < 5e-4, "{}", res.risk);
        assert_eq!(res.times.len(), 30);
        assert!(res.cdf.windows(2).all(|w| w[1] >= w[0]));
        let (risk, ok) = risk_level(&p, &b, 480.0, HORIZON, 0.15).unwrap();
        assert!(ok && risk == res.risk);
        assert!(!risk_level(&p, &b, 480.0, HORIZON, 0.10).unwrap().1);
    }

    #[test]
    fn unreachable_boundary_has_no_risk() {
        let (p, _) = table1();
        let far = Boundary::mean_offset(&p, 50.0 * p.stationary_variance().sqrt(), 0.0);
        let res = solve_volterra(&p, &far, 240.0, HORIZON).unwrap();
        assert!(res.risk < 1e-6);
        assert!(risk_level(&p, &far, 240.0, HORIZON, 1e-5).unwrap().1);
    }

    #[test]
    fn tabulated_boundary_agrees_with_analytic() {
        let (p, b) = table1();
        let dt = 60.0;
        let values: Vec<f64> = (0..=240).map(|k| b.value(k as f64 * dt)).collect();
        let tab = Boundary::tabulated(0.0, dt, values).unwrap();
        let a = solve_volterra(&p, &b, 240.0, HORIZON).unwrap().risk;
        let t = solve_volterra(&p, &tab, 240.0, HORIZON).unwrap().risk;
        assert!((a - t).abs() < 1e-4, "{a} vs {t}");
    }

    #[test]
    fn tabulated_interpolation_and_derivative() {
        let tab = Boundary::tabulated(1.0, 0.5, vec![0.0, 1.0, 4.0]).unwrap();
        assert_eq!(tab.value(1.25), 0.5);
        assert_eq!(tab.value(0.0), 0.0);
        assert_eq!(tab.value(9.0), 4.0);
        assert_eq!(tab.derivative(1.0), 2.0);
        assert_eq!(tab.derivative(1.5), 4.0);
        assert_eq!(tab.derivative(2.0), 6.0);
        assert_eq!(tab.derivative(1.25), 3.0);
    }

    #[test]
    fn deterministic_paths_never_cross_a_boundary_above_the_mean() {
        let p = OuProcess::new(0.0, 1.0, 2.0, 1e-300, MeanLevel::sinusoidal(1.0, 0.5, 3.0, 0.0)).unwrap();
        let b = Boundary::mean_offset(&p, 0.01, 0.0);
        assert_eq!(mc_first_passage_risk(&p, &b, 0.01, 2.0, 200, 3).unwrap(), 0.0);
    }

    #[test]
    fn csv_has_header_and_origin() {
        let (p, b) = table1();
        let res = solve_volterra(&p, &b, 1440.0, HORIZON).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,g,G");
        assert_eq!(lines[1], "0,0,0");
        assert_eq!(lines.len(), 12);
    }
}
