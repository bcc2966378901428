//! Lognormal market model and return quadrature.
//!
//! A portfolio holding fraction `π` in the risky asset and `1−π` at the risk
//! free rate has, over a step of length `dt`, log gross return
//! `N(mean, sd²)` with `mean = (r + π(μ−r) − π²σ²/2)·dt` and
//! `sd = |π|·σ·√dt`. Expectations over the gross return are evaluated with
//! Gauss–Hermite quadrature; path simulation uses per-path counter-based RNG
//! substreams so results are reproducible and prefix-stable in the number of
//! paths.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("market parameters invalid: {0}")]
    Validation(String),
}

/// Risk-free rate, risky drift, and risky volatility (annualized, real terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl MarketParams {
    pub fn new(r: f64, mu: f64, sigma: f64) -> Result<Self, MarketError> {
        let m = Self { r, mu, sigma };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if !self.r.is_finite() || !self.mu.is_finite() || !self.sigma.is_finite() {
            return Err(MarketError::Validation(
                "parameters must be finite".into(),
            ));
        }
        if self.sigma < 0.0 {
            return Err(MarketError::Validation(format!(
                "volatility must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Mean and standard deviation of the log gross return over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogReturnParams {
    pub mean: f64,
    pub sd: f64,
}

/// Log-return distribution of the constantly rebalanced `π` portfolio.
pub fn log_return_params(market: &MarketParams, pi: f64, dt: f64) -> LogReturnParams {
    let mean = (market.r + pi * (market.mu - market.r)
        - 0.5 * pi * pi * market.sigma * market.sigma)
        * dt;
    let sd = pi.abs() * market.sigma * dt.sqrt();
    LogReturnParams { mean, sd }
}

/// Maximum Newton iterations per Gauss–Hermite root.
const GH_MAX_ITER: usize = 64;

/// Nodes and weights of the probabilists' Gauss–Hermite rule: `z` values and
/// probabilities such that `Σ w_i·f(z_i) ≈ E[f(Z)]` for `Z ~ N(0,1)`, exact
/// for polynomials up to degree `2k−1`.
pub fn standard_normal_quadrature(k: usize) -> Result<(Vec<f64>, Vec<f64>), MarketError> {
    if k == 0 {
        return Err(MarketError::Validation(
            "quadrature order must be at least 1".into(),
        ));
    }
    // Roots of the physicists' Hermite polynomial H_k via Newton iteration on
    // the orthonormal three-term recurrence, then rescaled to the standard
    // normal measure (z = √2·x, w = w_phys/√π).
    let n = k;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = (n + 1) / 2;
    let nf = n as f64;
    for i in 0..m {
        let mut z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => x[0] - 1.14 * nf.powf(0.426) / x[0],
            2 => 1.86 * x[1] - 0.86 * x[0],
            3 => 1.91 * x[2] - 0.91 * x[1],
            _ => 2.0 * x[i - 1] - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..GH_MAX_ITER {
            // Evaluate the orthonormal Hermite function of degree n at z.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Convert from weight e^{−x²} to the standard normal measure and order
    // nodes ascending.
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| (std::f64::consts::SQRT_2 * -xi, wi / sqrt_pi))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Exact middle node for odd k.
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let nodes = pairs.iter().map(|p| p.0).collect();
    let weights = pairs.iter().map(|p| p.1 / total).collect();
    Ok((nodes, weights))
}

/// Discrete gross-return distribution `(R_i, w_i)` used for expectations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ReturnQuadrature {
    /// Degenerate distribution putting all mass on one gross return.
    pub fn single(r_gross: f64) -> Self {
        Self {
            nodes: vec![r_gross],
            weights: vec![1.0],
        }
    }

    /// `E[R]`.
    pub fn mean(&self) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| r * w)
            .sum()
    }

    /// `E[R^a]` (used for power-utility portfolio choice).
    pub fn expected_power(&self, a: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| r.powf(a) * w)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gauss–Hermite gross-return quadrature for the `π` portfolio over one step.
///
/// With zero diffusion (`π = 0`, `σ = 0`, or `k = 1`) the distribution
/// collapses to a single node `exp(mean)`. Weights always sum to one and all
/// nodes are strictly positive.
pub fn return_nodes(
    market: &MarketParams,
    pi: f64,
    dt: f64,
    k: usize,
) -> Result<ReturnQuadrature, MarketError> {
    market.validate()?;
    if !(dt > 0.0) {
        return Err(MarketError::Validation(format!(
            "step length must be positive, got {dt}"
        )));
    }
    if !pi.is_finite() {
        return Err(MarketError::Validation("π must be finite".into()));
    }
    let lr = log_return_params(market, pi, dt);
    if lr.sd == 0.0 || k == 1 {
        return Ok(ReturnQuadrature::single(lr.mean.exp()));
    }
    let (z, w) = standard_normal_quadrature(k)?;
    let nodes: Vec<f64> = z.iter().map(|zi| (lr.mean + lr.sd * zi).exp()).collect();
    Ok(ReturnQuadrature { nodes, weights: w })
}

/// Standard normal shocks, one row per path, generated from independent
/// per-path RNG substreams so that path `i` does not depend on `n_paths`.
#[derive(Debug, Clone)]
pub struct ShockMatrix {
    n_paths: usize,
    n_steps: usize,
    data: Vec<f64>,
}

impl ShockMatrix {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Shocks of one path, length `n_steps`.
    pub fn path(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_steps..(i + 1) * self.n_steps]
    }
}

/// Draws standard normals via the Box–Muller transform.
pub struct NormalSource<R: RngCore> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> NormalSource<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 ∈ (0, 1] keeps the logarithm finite.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }
}

/// RNG for substream `stream` of the master seed (market paths, death draws,
/// and shadow accounts each get their own stream index).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates `n_paths × n_steps` standard normal shocks; path `i` is drawn
/// from substream `i` of `seed`.
pub fn simulate_shocks(n_paths: usize, n_steps: usize, seed: u64) -> ShockMatrix {
    let mut data = vec![0.0; n_paths * n_steps];
    for i in 0..n_paths {
        let mut src = NormalSource::new(stream_rng(seed, i as u64));
        for j in 0..n_steps {
            data[i * n_steps + j] = src.next_normal();
        }
    }
    ShockMatrix {
        n_paths,
        n_steps,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base() -> MarketParams {
        MarketParams::new(0.027, 0.062, 0.15).unwrap()
    }

    #[test]
    fn log_return_reference_values() {
        let m = base();
        let lr0 = log_return_params(&m, 0.0, 1.0);
        assert_relative_eq!(lr0.mean, 0.027, max_relative = 1e-12);
        assert_eq!(lr0.sd, 0.0);

        let lr1 = log_return_params(&m, 1.0, 1.0);
        assert_relative_eq!(lr1.mean, 0.05075, max_relative = 1e-12);
        assert_relative_eq!(lr1.sd, 0.15, max_relative = 1e-12);

        let lr_half = log_return_params(&m, 0.5, 1.0);
        assert_relative_eq!(lr_half.mean, 0.0416875, max_relative = 1e-12);
        assert_relative_eq!(lr_half.sd, 0.075, max_relative = 1e-12);
    }

    #[test]
    fn log_return_scales_with_dt() {
        let m = base();
        let lr = log_return_params(&m, 1.0, 0.25);
        assert_relative_eq!(lr.mean, 0.05075 * 0.25, max_relative = 1e-12);
        assert_relative_eq!(lr.sd, 0.15 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn quadrature_small_orders_match_closed_form() {
        let (z1, w1) = standard_normal_quadrature(1).unwrap();
        assert_eq!(z1, vec![0.0]);
        assert_eq!(w1, vec![1.0]);

        let (z2, w2) = standard_normal_quadrature(2).unwrap();
        assert_relative_eq!(z2[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(z2[1], 1.0, max_relative = 1e-12);
        assert_relative_eq!(w2[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(w2[1], 0.5, max_relative = 1e-12);

        let (z3, w3) = standard_normal_quadrature(3).unwrap();
        let s3 = 3f64.sqrt();
        assert_relative_eq!(z3[0], -s3, max_relative = 1e-12);
        assert_eq!(z3[1], 0.0);
        assert_relative_eq!(z3[2], s3, max_relative = 1e-12);
        assert_relative_eq!(w3[0], 1.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(w3[1], 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn quadrature_reproduces_normal_moments() {
        let (z, w) = standard_normal_quadrature(9).unwrap();
        let moment = |k: i32| -> f64 {
            z.iter()
                .zip(&w)
                .map(|(zi, wi)| zi.powi(k) * wi)
                .sum::<f64>()
        };
        assert!((moment(1)).abs() < 1e-12);
        assert_relative_eq!(moment(2), 1.0, max_relative = 1e-10);
        assert_relative_eq!(moment(4), 3.0, max_relative = 1e-10);
        assert_relative_eq!(moment(6), 15.0, max_relative = 1e-10);
        assert_relative_eq!(moment(8), 105.0, max_relative = 1e-10);
    }

    #[test]
    fn return_nodes_mean_matches_lognormal() {
        let m = base();
        let q7 = return_nodes(&m, 1.0, 1.0, 7).unwrap();
        let exact = 0.062f64.exp();
        assert!(
            (q7.mean() - exact).abs() < 1e-4,
            "K=7 mean {} vs {}",
            q7.mean(),
            exact
        );
        let q9 = return_nodes(&m, 1.0, 1.0, 9).unwrap();
        assert!((q9.mean() - exact).abs() < 1e-6);
        // Weights are a probability distribution and nodes are positive
        // gross returns.
        for q in [&q7, &q9] {
            assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.nodes.iter().all(|r| *r > 0.0));
            assert!(q.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn return_nodes_mean_invariant_across_pi() {
        let m = base();
        for &pi in &[0.1, 0.3, 0.5, 0.8, 1.0] {
            let q = return_nodes(&m, pi, 1.0, 9).unwrap();
            let lr = log_return_params(&m, pi, 1.0);
            let exact = (lr.mean + 0.5 * lr.sd * lr.sd).exp();
            assert!(
                (q.mean() - exact).abs() < 1e-6,
                "π={pi}: {} vs {}",
                q.mean(),
                exact
            );
        }
    }

    #[test]
    fn zero_diffusion_collapses_to_single_node() {
        let m = base();
        let q = return_nodes(&m, 0.0, 1.0, 9).unwrap();
        assert_eq!(q.len(), 1);
        assert_relative_eq!(q.nodes[0], 0.027f64.exp(), max_relative = 1e-12);
        assert_eq!(q.weights[0], 1.0);

        let k1 = return_nodes(&m, 1.0, 1.0, 1).unwrap();
        assert_eq!(k1.len(), 1);
        assert_relative_eq!(k1.nodes[0], 0.05075f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn expected_power_matches_lognormal_closed_form() {
        let m = base();
        let q = return_nodes(&m, 0.6, 1.0, 9).unwrap();
        let lr = log_return_params(&m, 0.6, 1.0);
        for &a in &[-1.0f64, -0.5, 0.5, 2.0] {
            let exact = (a * lr.mean + 0.5 * a * a * lr.sd * lr.sd).exp();
            assert!(
                (q.expected_power(a) - exact).abs() < 1e-6 * exact,
                "a={a}: {} vs {}",
                q.expected_power(a),
                exact
            );
        }
    }

    #[test]
    fn shocks_are_deterministic_and_prefix_stable() {
        let a = simulate_shocks(10, 8, 42);
        let b = simulate_shocks(10, 8, 42);
        for i in 0..10 {
            assert_eq!(a.path(i), b.path(i));
        }
        let small = simulate_shocks(5, 8, 42);
        for i in 0..5 {
            assert_eq!(small.path(i), a.path(i), "path {i} must not depend on n_paths");
        }
        let other = simulate_shocks(10, 8, 43);
        assert_ne!(a.path(0), other.path(0));
    }

    #[test]
    fn shock_sample_moments() {
        let shocks = simulate_shocks(1000, 1000, 7);
        let n = (shocks.n_paths() * shocks.n_steps()) as f64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..shocks.n_paths() {
            for &z in shocks.path(i) {
                sum += z;
                sum_sq += z * z;
            }
        }
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!(mean.abs() < 0.005, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "sample variance {var}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(MarketParams::new(0.02, 0.06, -0.1).is_err());
        let m = base();
        assert!(return_nodes(&m, 1.0, 0.0, 9).is_err());
        assert!(return_nodes(&m, f64::NAN, 1.0, 9).is_err());
        assert!(return_nodes(&m, 1.0, 1.0, 0).is_err());
        assert!(standard_normal_quadrature(0).is_err());
    }
}
