//! Shape-preserving interpolation used by the dynamic-programming engine.
//!
//! Value functions are interpolated with a Fritsch–Carlson monotone cubic
//! (no overshoot between knots, C¹), policies with piecewise-linear
//! interpolation (which preserves linear feasibility constraints such as
//! `γ·δt ≤ x`). Evenly spaced grids get an O(1) segment lookup and a fused
//! "shifted" evaluation: querying every knot multiplied by a constant factor
//! is a single stencil pass when the grid is uniform in log space.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("interpolation input invalid: {0}")]
    Validation(String),
}

/// Relative tolerance for detecting an evenly spaced knot vector.
const UNIFORM_TOL: f64 = 1e-12;

fn validate_knots(x: &[f64], y: &[f64]) -> Result<(), InterpError> {
    if x.len() != y.len() {
        return Err(InterpError::Validation(format!(
            "knot and value lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(InterpError::Validation("no knots".into()));
    }
    for w in x.windows(2) {
        if !(w[1] > w[0]) {
            return Err(InterpError::Validation(format!(
                "knots must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    for (i, v) in y.iter().enumerate() {
        if v.is_nan() {
            return Err(InterpError::Validation(format!("NaN value at knot {i}")));
        }
    }
    Ok(())
}

fn uniform_spacing(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let h = x[1] - x[0];
    let scale = h.abs().max(1e-300);
    for w in x.windows(2) {
        if ((w[1] - w[0]) - h).abs() > UNIFORM_TOL * scale.max(w[1].abs()) {
            return None;
        }
    }
    Some(h)
}

/// Cubic Hermite basis values at local parameter `t ∈ [0, 1]`.
#[inline]
pub fn hermite_weights(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    )
}

/// Fritsch–Carlson knot derivatives: shape-preserving (the interpolant is
/// monotone wherever the data are).
fn fritsch_carlson_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![0.0];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = y
        .windows(2)
        .zip(&h)
        .map(|(w, hi)| (w[1] - w[0]) / hi)
        .collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        let (d0, d1) = (delta[i - 1], delta[i]);
        if d0 * d1 <= 0.0 {
            d[i] = 0.0;
        } else {
            // Weighted harmonic mean; weights keep the result in the
            // monotonicity region.
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / d0 + w2 / d1);
        }
    }
    d[0] = edge_derivative(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = edge_derivative(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Three-point one-sided derivative with the standard monotonicity fix-up.
fn edge_derivative(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        0.0
    } else if d0 * d1 < 0.0 && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Shape-preserving cubic interpolant with constant extrapolation beyond the
/// knot range (out-of-range queries are reported to the caller).
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
    uniform_h: Option<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, InterpError> {
        validate_knots(&x, &y)?;
        let d = fritsch_carlson_derivatives(&x, &y);
        let uniform_h = uniform_spacing(&x);
        Ok(Self { x, y, d, uniform_h })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.d
    }

    /// Spacing when the knots are evenly spaced.
    pub fn uniform_spacing(&self) -> Option<f64> {
        self.uniform_h
    }

    fn segment_of(&self, xq: f64) -> usize {
        let n = self.x.len();
        if let Some(h) = self.uniform_h {
            let i = ((xq - self.x[0]) / h).floor();
            return (i.max(0.0) as usize).min(n - 2);
        }
        let i = self.x.partition_point(|&k| k <= xq);
        i.clamp(1, n - 1) - 1
    }

    /// Value at `xq`; constant beyond the ends. The flag reports whether the
    /// query was out of range.
    pub fn eval_flagged(&self, xq: f64) -> (f64, bool) {
        let n = self.x.len();
        if n == 1 {
            return (self.y[0], xq != self.x[0]);
        }
        if xq <= self.x[0] {
            return (self.y[0], xq < self.x[0]);
        }
        if xq >= self.x[n - 1] {
            return (self.y[n - 1], xq > self.x[n - 1]);
        }
        let i = self.segment_of(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = ((xq - self.x[i]) / h).clamp(0.0, 1.0);
        let (h00, h10, h01, h11) = hermite_weights(t);
        (
            h00 * self.y[i] + h * h10 * self.d[i] + h01 * self.y[i + 1] + h * h11 * self.d[i + 1],
            false,
        )
    }

    /// Value at `xq` with silent clamping.
    pub fn eval(&self, xq: f64) -> f64 {
        self.eval_flagged(xq).0
    }

    /// Evaluates `f(x_j + delta)` for every knot `j` of an evenly spaced
    /// interpolant in one stencil pass, writing into `out`.
    ///
    /// Out-of-range targets are clamped to the end values; the return value
    /// counts `(below, above)` clamps so callers can patch or log them.
    pub fn eval_shifted_uniform(&self, delta: f64, out: &mut [f64]) -> (usize, usize) {
        let n = self.x.len();
        assert_eq!(out.len(), n, "output buffer must match the knot count");
        let h = self
            .uniform_h
            .expect("shifted evaluation requires an evenly spaced grid");
        let steps = (delta / h).floor();
        let frac = (delta / h - steps).clamp(0.0, 1.0);
        let k = steps as i64;
        let (h00, h10, h01, h11) = hermite_weights(frac);
        let (w0, w1) = (h00, h01);
        let (v0, v1) = (h * h10, h * h11);
        let mut below = 0usize;
        let mut above = 0usize;
        for j in 0..n {
            let idx = j as i64 + k;
            if idx < 0 {
                out[j] = self.y[0];
                below += 1;
            } else if idx as usize >= n - 1 {
                // idx == n−1 with frac == 0 is the exact last knot.
                if idx as usize == n - 1 && frac == 0.0 {
                    out[j] = self.y[n - 1];
                } else {
                    out[j] = self.y[n - 1];
                    above += 1;
                }
            } else {
                let i = idx as usize;
                out[j] = w0 * self.y[i] + w1 * self.y[i + 1] + v0 * self.d[i] + v1 * self.d[i + 1];
            }
        }
        (below, above)
    }
}

/// Piecewise-linear interpolant with constant extrapolation beyond the ends.
#[derive(Debug, Clone)]
pub struct Linear {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Linear {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, InterpError> {
        validate_knots(&x, &y)?;
        Ok(Self { x, y })
    }

    pub fn eval(&self, xq: f64) -> f64 {
        let n = self.x.len();
        if xq <= self.x[0] {
            return self.y[0];
        }
        if xq >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|&k| k <= xq).clamp(1, n - 1) - 1;
        let t = (xq - self.x[i]) / (self.x[i + 1] - self.x[i]);
        self.y[i] + t * (self.y[i + 1] - self.y[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reproduces_linear_data_exactly() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = MonotoneCubic::new(x, y).unwrap();
        for q in [0.0, 0.3, 2.5, 7.99, 9.0] {
            assert_relative_eq!(c.eval(q), 2.0 * q + 1.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn flat_segment_derivatives_are_zero() {
        let c = MonotoneCubic::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        let d = c.derivatives();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_relative_eq!(d[0], 1.5);
        assert_relative_eq!(d[3], 1.5);
        // Hand-evaluated Hermite value on the first segment at t = 1/2.
        assert_relative_eq!(c.eval(0.5), 0.6875, max_relative = 1e-14);
        // No overshoot above the flat plateau.
        for i in 0..=100 {
            let q = 1.0 + (i as f64) / 100.0;
            assert!((0.0..=2.0).contains(&c.eval(q)));
        }
    }

    #[test]
    fn clamps_and_flags_out_of_range() {
        let c = MonotoneCubic::new(vec![0.0, 1.0], vec![3.0, 5.0]).unwrap();
        assert_eq!(c.eval_flagged(-1.0), (3.0, true));
        assert_eq!(c.eval_flagged(2.0), (5.0, true));
        assert_eq!(c.eval_flagged(0.5).1, false);
    }

    #[test]
    fn uniform_detection() {
        let u = MonotoneCubic::new(vec![0.0, 0.5, 1.0, 1.5], vec![0.0, 1.0, 1.5, 1.6]).unwrap();
        assert_eq!(u.uniform_spacing(), Some(0.5));
        let nu = MonotoneCubic::new(vec![0.0, 0.5, 1.2], vec![0.0, 1.0, 1.5]).unwrap();
        assert_eq!(nu.uniform_spacing(), None);
    }

    #[test]
    fn shifted_pass_matches_pointwise_eval() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (v - 1.7).tanh() + 0.2 * v).collect();
        let c = MonotoneCubic::new(x.clone(), y).unwrap();
        let mut out = vec![0.0; n];
        for delta in [-0.73, -0.1, 0.0, 0.05, 0.31, 1.44] {
            let (below, above) = c.eval_shifted_uniform(delta, &mut out);
            let mut expect_below = 0;
            let mut expect_above = 0;
            for j in 0..n {
                let q = x[j] + delta;
                let (direct, oob) = c.eval_flagged(q);
                assert_relative_eq!(out[j], direct, max_relative = 1e-12, epsilon = 1e-12);
                if oob && q < x[0] {
                    expect_below += 1;
                }
                if oob && q > x[n - 1] {
                    expect_above += 1;
                }
            }
            assert_eq!(below, expect_below, "delta {delta}");
            assert_eq!(above, expect_above, "delta {delta}");
        }
    }

    #[test]
    fn linear_interp_basics() {
        let l = Linear::new(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 2.0]).unwrap();
        assert_relative_eq!(l.eval(0.5), 1.0);
        assert_relative_eq!(l.eval(2.0), 2.0);
        assert_eq!(l.eval(-4.0), 0.0);
        assert_eq!(l.eval(9.0), 2.0);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(MonotoneCubic::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(MonotoneCubic::new(vec![1.0, 0.5], vec![1.0, 2.0]).is_err());
        assert!(MonotoneCubic::new(vec![], vec![]).is_err());
        assert!(MonotoneCubic::new(vec![0.0, 1.0], vec![1.0, f64::NAN]).is_err());
        assert!(Linear::new(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn interpolant_preserves_monotone_ranges(
            raw in proptest::collection::vec(0.01f64..1.0, 4..12),
            seed_y in proptest::collection::vec(-1.0f64..1.0, 4..12),
            queries in proptest::collection::vec(0.0f64..1.0, 20),
        ) {
            let n = raw.len().min(seed_y.len());
            // Build strictly increasing knots and monotone values.
            let mut x = vec![0.0f64];
            for i in 0..n { x.push(x[i] + raw[i]); }
            let mut y = vec![0.0f64];
            for i in 0..n { y.push(y[i] + seed_y[i].abs()); }
            let c = MonotoneCubic::new(x.clone(), y.clone()).unwrap();
            for q in &queries {
                let xq = x[0] + q * (x[n] - x[0]);
                let v = c.eval(xq);
                // Monotone data ⇒ interpolant stays within the global range
                // and is non-decreasing along the queries' order after sort.
                prop_assert!(v >= y[0] - 1e-12 && v <= y[n] + 1e-12);
            }
            // Spot-check monotonicity on a fine sweep.
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=200 {
                let xq = x[0] + (i as f64 / 200.0) * (x[n] - x[0]);
                let v = c.eval(xq);
                prop_assert!(v >= prev - 1e-9, "not monotone at {xq}: {v} < {prev}");
                prev = v;
            }
        }
    }
}
