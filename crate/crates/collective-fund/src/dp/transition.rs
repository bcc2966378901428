//! Continuation-value machinery shared by the solver, the policy evaluator
//! and the brute-force oracle: stitched next-step value lookups, the exact
//! binomial mixture over surviving co-members, and the stencil tabulation
//! used on evenly log-spaced grids.

use super::VALUE_FLOOR;
use crate::interp::MonotoneCubic;
use crate::market::ReturnQuadrature;
use crate::prefs::PreferenceSpec;

/// How continuation values extend beyond the wealth grid.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Tail {
    /// Linear bridge to the zero-wealth value below the grid, constant above
    /// it. Matches the exponential (KM) value shape: finite at zero wealth
    /// (the state pension keeps utility bounded) and saturating in wealth.
    Bridge,
    /// Power extension `V(x_b)·(x/x_b)^ρ` beyond a boundary node `x_b`.
    /// Exact for additive power (vNM) preferences, whose value function is
    /// homothetic of degree ρ. A linear bridge is unusable there: with ρ < 0
    /// the zero-wealth value is −∞, so bridging to its floored stand-in
    /// injects astronomic magnitudes that poison the whole recursion.
    Power { rho: f64 },
}

impl Tail {
    pub fn for_prefs(prefs: &PreferenceSpec) -> Tail {
        match prefs {
            PreferenceSpec::Km(_) => Tail::Bridge,
            PreferenceSpec::Vnm(p) => Tail::Power { rho: p.rho },
        }
    }

    /// Value at `0 < x < x_min`, given the bottom-node value `v0` and the
    /// zero-wealth value `w0`.
    #[inline]
    pub fn below(&self, x: f64, x_min: f64, v0: f64, w0: f64) -> f64 {
        match *self {
            Tail::Bridge => w0 + (v0 - w0) * (x / x_min),
            Tail::Power { rho } => power_tail(v0, x / x_min, rho),
        }
    }

    /// Value at `x > x_max`, given the top-node value `v_last`.
    #[inline]
    pub fn above(&self, x: f64, x_max: f64, v_last: f64) -> f64 {
        match *self {
            Tail::Bridge => v_last,
            Tail::Power { rho } => power_tail(v_last, x / x_max, rho),
        }
    }
}

/// `v·ratio^ρ` with the floating-point corners pinned: ±∞ products floor to
/// [`VALUE_FLOOR`] and the 0·∞ indeterminate keeps the boundary value.
#[inline]
fn power_tail(v: f64, ratio: f64, rho: f64) -> f64 {
    let scaled = v * ratio.powf(rho);
    if scaled.is_nan() {
        v
    } else {
        scaled.max(VALUE_FLOOR)
    }
}

/// Total binomial tail mass allowed to be dropped before renormalizing.
const BINOM_TRUNC_EPS: f64 = 1e-12;

/// Truncated binomial pmf of `B ~ Binomial(n, p)`: returns `(b0, probs)`
/// covering `b0 ..= b0 + probs.len() − 1`, with the dropped tail mass at most
/// [`BINOM_TRUNC_EPS`] and the retained mass renormalized to 1.
pub(crate) fn binomial_pmf(n: usize, p: f64) -> (usize, Vec<f64>) {
    if n == 0 || p <= 0.0 {
        return (0, vec![1.0]);
    }
    if p >= 1.0 {
        return (n, vec![1.0]);
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let mut ln_fact = vec![0.0f64; n + 1];
    for k in 1..=n {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let mut pmf: Vec<f64> = (0..=n)
        .map(|b| {
            (ln_fact[n] - ln_fact[b] - ln_fact[n - b]
                + b as f64 * ln_p
                + (n - b) as f64 * ln_q)
                .exp()
        })
        .collect();
    let mut lo = 0usize;
    let mut hi = n;
    let mut dropped = 0.0;
    while lo < hi {
        let (side_lo, side_hi) = (pmf[lo], pmf[hi]);
        let candidate = side_lo.min(side_hi);
        if dropped + candidate > BINOM_TRUNC_EPS {
            break;
        }
        dropped += candidate;
        if side_lo <= side_hi {
            lo += 1;
        } else {
            hi -= 1;
        }
    }
    let mut probs: Vec<f64> = pmf.drain(lo..=hi).collect();
    let total: f64 = probs.iter().sum();
    for q in probs.iter_mut() {
        *q /= total;
    }
    (lo, probs)
}

/// How post-consumption wealth maps to next-period per-survivor wealth.
#[derive(Debug, Clone)]
pub(crate) enum Mixing {
    /// `x′ = y·R`.
    Individual,
    /// `x′ = y·R / s` — deterministic mortality credits.
    Infinite { s: f64 },
    /// `x′ = y·R·m/(B+1)` with `B ~ Binomial(m−1, s)` surviving co-members
    /// (truncated pmf starting at `b0`).
    Finite {
        m: usize,
        b0: usize,
        probs: Vec<f64>,
    },
}

/// Next-step value functions: one stitched interpolant per survivor count,
/// plus the exact zero-wealth values.
pub(crate) struct NextStep {
    interp: Vec<MonotoneCubic>,
    w0: Vec<f64>,
    log_space: bool,
    x_min: f64,
    x_max: f64,
    tail: Tail,
}

impl NextStep {
    /// Builds interpolants from next-step node values `values[m′−1][j]`
    /// (flattened, row stride `coords.len()`) over interpolation coordinates
    /// `coords` (log-wealth for log grids, wealth otherwise).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        values: &[f64],
        w0: &[f64],
        m_count: usize,
        coords: &[f64],
        log_space: bool,
        x_min: f64,
        x_max: f64,
        tail: Tail,
    ) -> Self {
        let nx = coords.len();
        debug_assert_eq!(values.len(), m_count * nx);
        debug_assert_eq!(w0.len(), m_count);
        let interp = (0..m_count)
            .map(|m| {
                let row = &values[m * nx..(m + 1) * nx];
                MonotoneCubic::new(coords.to_vec(), row.to_vec())
                    .expect("grid coordinates are strictly increasing")
            })
            .collect();
        Self {
            interp,
            w0: w0.to_vec(),
            log_space,
            x_min,
            x_max,
            tail,
        }
    }

    pub fn zero_value(&self, mp_idx: usize) -> f64 {
        self.w0[mp_idx]
    }

    pub fn interpolant(&self, mp_idx: usize) -> &MonotoneCubic {
        &self.interp[mp_idx]
    }

    /// Value at wealth `x` for survivor index `mp_idx` (= m′ − 1), extended
    /// beyond the grid by the configured [`Tail`].
    pub fn eval(&self, mp_idx: usize, x: f64, clamps: &mut ClampCount) -> f64 {
        if x <= 0.0 {
            return self.w0[mp_idx];
        }
        if x < self.x_min {
            clamps.below += 1;
            let v0 = self.interp[mp_idx].values()[0];
            return self.tail.below(x, self.x_min, v0, self.w0[mp_idx]);
        }
        if x > self.x_max {
            clamps.above += 1;
            let v_last = *self.interp[mp_idx].values().last().unwrap();
            return self.tail.above(x, self.x_max, v_last);
        }
        let coord = if self.log_space { x.ln() } else { x };
        self.interp[mp_idx].eval(coord)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ClampCount {
    pub below: u64,
    pub above: u64,
}

/// Expected next-step value after investing post-consumption wealth `y`:
/// quadrature over returns and, for finite funds, the binomial mixture over
/// survivor counts. This is the reference evaluation path — the solver's
/// stored values and the policy evaluator both use it, so their arithmetic
/// is identical term for term.
pub(crate) fn direct_continuation(
    next: &NextStep,
    quad: &ReturnQuadrature,
    mixing: &Mixing,
    y: f64,
    clamps: &mut ClampCount,
) -> f64 {
    let nodes = &quad.nodes;
    let weights = &quad.weights;
    let mut total = 0.0;
    match mixing {
        Mixing::Individual => {
            for (&r, &w) in nodes.iter().zip(weights) {
                total += w * next.eval(0, y * r, clamps);
            }
        }
        Mixing::Infinite { s } => {
            for (&r, &w) in nodes.iter().zip(weights) {
                total += w * next.eval(0, y * r / s, clamps);
            }
        }
        Mixing::Finite { m, b0, probs } => {
            let m_f = *m as f64;
            for (&r, &w) in nodes.iter().zip(weights) {
                let mut inner = 0.0;
                for (off, &q) in probs.iter().enumerate() {
                    let survivors = b0 + off + 1;
                    inner += q * next.eval(survivors - 1, y * r * m_f / survivors as f64, clamps);
                }
                total += w * inner;
            }
        }
    }
    total.max(VALUE_FLOOR)
}

/// Collects the consumption levels at which some branch of the continuation
/// crosses a wealth-grid boundary (the bridge below `x_min`, the clamp above
/// `x_max`). The continuation value has a derivative kink at each, so the
/// consumption objective is only piecewise smooth; a bracketing search must
/// scan these points or a narrow peak pressed against a kink can hide
/// between two regular scan points. Clears and refills `out`.
pub(crate) fn boundary_kinks(
    mixing: &Mixing,
    quad: &ReturnQuadrature,
    x: f64,
    dt: f64,
    x_min: f64,
    x_max: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    let xdt = x / dt;
    let mut push = |scale: f64| {
        // Next wealth y·scale crosses `bound` at y = bound/scale.
        for bound in [x_min, x_max] {
            let g = (x - bound / scale) / dt;
            if g.is_finite() && g > 0.0 && g < xdt {
                out.push(g);
            }
        }
    };
    match mixing {
        Mixing::Individual => {
            for &r in &quad.nodes {
                push(r);
            }
        }
        Mixing::Infinite { s } => {
            for &r in &quad.nodes {
                push(r / s);
            }
        }
        Mixing::Finite { m, b0, probs } => {
            for &r in &quad.nodes {
                for off in 0..probs.len() {
                    let survivors = (b0 + off + 1) as f64;
                    push(r * *m as f64 / survivors);
                }
            }
        }
    }
}

/// Accumulates `weight · V(x_j · factor)` into `out[j]` for every grid point,
/// where `V` is the stitched value behind `interp`/`w0`, extended beyond the
/// grid by `tail`. Uses the one-pass stencil on evenly log-spaced grids and
/// pointwise evaluation otherwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_scaled(
    interp: &MonotoneCubic,
    w0: f64,
    log_space: bool,
    xs: &[f64],
    x_min: f64,
    x_max: f64,
    tail: Tail,
    factor: f64,
    weight: f64,
    scratch: &mut [f64],
    out: &mut [f64],
    clamps: &mut ClampCount,
) {
    debug_assert!(factor > 0.0);
    let n = xs.len();
    if log_space && interp.uniform_spacing().is_some() {
        let delta = factor.ln();
        let (below, above) = interp.eval_shifted_uniform(delta, scratch);
        let v0 = interp.values()[0];
        let v_last = *interp.values().last().unwrap();
        for j in 0..below {
            let y = xs[j] * factor;
            scratch[j] = tail.below(y, x_min, v0, w0);
        }
        for j in n - above..n {
            let y = xs[j] * factor;
            scratch[j] = tail.above(y, x_max, v_last);
        }
        clamps.below += below as u64;
        clamps.above += above as u64;
        for j in 0..n {
            out[j] += weight * scratch[j];
        }
    } else {
        let v0 = interp.values()[0];
        let v_last = *interp.values().last().unwrap();
        for j in 0..n {
            let y = xs[j] * factor;
            let v = if y < x_min {
                clamps.below += 1;
                tail.below(y, x_min, v0, w0)
            } else if y > x_max {
                clamps.above += 1;
                tail.above(y, x_max, v_last)
            } else {
                interp.eval(if log_space { y.ln() } else { y })
            };
            out[j] += weight * v;
        }
    }
}
