//! Annuity pricing and inversion, Monte Carlo gain estimation, and
//! fan-diagram statistics.

use crate::dp::{DpError, FundKind, PolicyTable};
use crate::market::{log_return_params, stream_rng, MarketParams, NormalSource};
use crate::mortality::MortalityTable;
use crate::prefs::{funding_cost, km_gain_weighted, FundingMode, PreferenceSpec, PrefsError};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Relative tolerance of the annuity-equivalent bisection (on the budget).
const EQUIVALENT_REL_TOL: f64 = 1e-6;
/// Budget-doubling cap while bracketing the annuity equivalent.
const MAX_BRACKET_DOUBLINGS: usize = 200;
/// Below this many paths the percentile curves are flagged as unstable.
const FAN_STABLE_PATHS: usize = 100;

/// RNG stream blocks. Market shocks share stream ids across fund kinds so
/// each path index sees the same market scenario under every kind; death
/// draws use a disjoint block so sampling them never perturbs the shared
/// shocks.
const SHOCK_STREAM_BASE: u64 = 1 << 32;
const DEATH_STREAM_BASE: u64 = 2 << 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Validation(String),
    #[error("annuity pricing failed: {0}")]
    Pricing(String),
    #[error("gain is not attainable by any annuity: {0}")]
    UnattainableGain(String),
    #[error(transparent)]
    Prefs(#[from] PrefsError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

/// Constant payout per year bought by `budget` under the given pricing mode:
/// `c = budget / funding_cost(level ≡ 1)`.
pub fn annuity_payout(
    budget: f64,
    r: f64,
    table: &MortalityTable,
    mode: FundingMode,
) -> Result<f64, EvalError> {
    if !(budget > 0.0) {
        return Err(EvalError::Validation(format!(
            "budget must be positive, got {budget}"
        )));
    }
    let factor = annuity_factor(r, table, mode)?;
    Ok(budget / factor)
}

/// Present value of a unit payout stream — the annuity factor.
pub fn annuity_factor(
    r: f64,
    table: &MortalityTable,
    mode: FundingMode,
) -> Result<f64, EvalError> {
    let factor = funding_cost(&vec![1.0; table.len()], r, table, mode)?;
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(EvalError::Pricing(format!("annuity factor {factor}")));
    }
    Ok(factor)
}

/// Gain of consuming `stream[i]` at each grid time until death, mixed
/// exactly over the death time: `Σ_τ p_τ · g(stream, τ)` where `g` is the
/// preference family's gain of the truncated stream. The running-satisfaction
/// arithmetic here is shared by the Monte Carlo estimator, so a deterministic
/// path reproduces this value bit for bit.
fn death_mixture_gain(
    prefs: &PreferenceSpec,
    stream: &[f64],
    table: &MortalityTable,
) -> Result<f64, EvalError> {
    if stream.len() != table.len() {
        return Err(EvalError::Validation(format!(
            "stream has {} points but the grid has {}",
            stream.len(),
            table.len()
        )));
    }
    let dt = table.dt();
    let mut sats = Vec::with_capacity(stream.len());
    let mut run = 0.0;
    for (i, &g) in stream.iter().enumerate() {
        run += prefs.utility_u(g, i) * dt;
        sats.push(run);
    }
    mixture_of_satisfactions(prefs, table.p(), &sats)
}

/// Death-time mixture of running satisfactions under the family's aggregate:
/// exponential for the multiplicative family, expectation for the additive
/// one. Zero-probability death times are skipped so an infinite satisfaction
/// there cannot poison the sum.
fn mixture_of_satisfactions(
    prefs: &PreferenceSpec,
    weights: &[f64],
    sats: &[f64],
) -> Result<f64, EvalError> {
    match prefs {
        PreferenceSpec::Km(_) => Ok(km_gain_weighted(
            weights
                .iter()
                .copied()
                .zip(sats.iter().copied())
                .filter(|&(w, _)| w > 0.0),
        )?),
        PreferenceSpec::Vnm(_) => {
            let mut total = 0.0;
            for (&w, &s) in weights.iter().zip(sats) {
                if w > 0.0 {
                    total += w * s;
                }
            }
            Ok(total)
        }
    }
}

/// Gain of a constant annuity paying `c` per year until death.
pub fn annuity_gain(
    prefs: &PreferenceSpec,
    c: f64,
    table: &MortalityTable,
) -> Result<f64, EvalError> {
    if !(c >= 0.0) {
        return Err(EvalError::Validation(format!(
            "annuity payout must be non-negative, got {c}"
        )));
    }
    let stream = vec![c; table.len()];
    death_mixture_gain(prefs, &stream, table)
}

/// Budget whose annuity achieves `gain`: bisection on the budget using the
/// monotonicity of the annuity gain in the payout, to relative tolerance
/// [`EQUIVALENT_REL_TOL`]. Gains below the zero-payout gain are unattainable.
pub fn annuity_equivalent(
    gain: f64,
    prefs: &PreferenceSpec,
    table: &MortalityTable,
    r: f64,
    mode: FundingMode,
) -> Result<f64, EvalError> {
    if gain.is_nan() {
        return Err(EvalError::Validation("gain is NaN".into()));
    }
    let floor = annuity_gain(prefs, 0.0, table)?;
    if gain < floor {
        return Err(EvalError::UnattainableGain(format!(
            "gain {gain} lies below the zero-payout gain {floor}"
        )));
    }
    if gain == floor {
        return Ok(0.0);
    }
    let factor = annuity_factor(r, table, mode)?;
    let gain_of = |b: f64| -> Result<f64, EvalError> { annuity_gain(prefs, b / factor, table) };
    // Bracket the target by doubling.
    let mut lo = 0.0f64;
    let mut hi = factor.max(1.0);
    let mut g_hi = gain_of(hi)?;
    let mut doublings = 0;
    while g_hi < gain {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(EvalError::UnattainableGain(format!(
                "gain {gain} exceeds every annuity gain up to budget {hi}"
            )));
        }
        g_hi = gain_of(hi)?;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= EQUIVALENT_REL_TOL * mid {
            break;
        }
        if gain_of(mid)? < gain {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `equivalent/budget − 1`.
pub fn annuity_outperformance(equivalent: f64, budget: f64) -> Result<f64, EvalError> {
    if !(budget > 0.0) {
        return Err(EvalError::Validation(format!(
            "budget must be positive, got {budget}"
        )));
    }
    Ok(equivalent / budget - 1.0)
}

/// Monte Carlo gain estimate of running a policy from initial wealth `x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McGain {
    pub estimate: f64,
    pub se: f64,
    /// Visits to wealths below the policy grid (bridged lookups).
    pub clamped_below: u64,
    /// Visits to wealths above the policy grid (clamped lookups).
    pub clamped_above: u64,
}

/// Forward-simulates the policy under the fund-kind wealth dynamics and
/// averages realized gains. Death times are integrated exactly (a mixture
/// over τ per market path) for the individual account and the infinite
/// collective; for finite funds the member's own death and the co-members'
/// survivor counts are sampled since they drive the wealth dynamics. Wealth
/// excursions outside the policy grid are clamped and counted.
#[allow(clippy::too_many_arguments)]
pub fn mc_gain(
    policy: &PolicyTable,
    prefs: &PreferenceSpec,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    x0: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McGain, EvalError> {
    let kind = kind.resolve()?;
    check_policy_instance(policy, market, table, kind, x0, n_paths)?;

    let gains: Result<Vec<(f64, u64, u64)>, EvalError> = (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_path_gain(policy, prefs, market, table, kind, x0, seed, p as u64))
        .collect();
    let gains = gains?;

    let n = gains.len() as f64;
    let mut clamped_below = 0u64;
    let mut clamped_above = 0u64;
    let mut mean = 0.0;
    let mut all_equal = true;
    for &(g, cb, ca) in &gains {
        mean += g;
        all_equal &= g == gains[0].0;
        clamped_below += cb;
        clamped_above += ca;
    }
    mean /= n;
    if all_equal {
        // Degenerate sample (e.g. zero volatility): the mean is the common
        // value exactly and the dispersion is zero, with no summation
        // rounding.
        mean = gains[0].0;
    }
    let se = if all_equal {
        0.0
    } else if gains.len() < 2 || !mean.is_finite() {
        if mean.is_finite() {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        let mut ss = 0.0;
        for &(g, _, _) in &gains {
            let d = g - mean;
            ss += d * d;
        }
        (ss / (n * (n - 1.0))).sqrt()
    };
    if clamped_below + clamped_above > 0 {
        log::info!(
            "mc_gain: {clamped_below} below-grid and {clamped_above} above-grid policy lookups were clamped"
        );
    }
    Ok(McGain {
        estimate: mean,
        se,
        clamped_below,
        clamped_above,
    })
}

fn check_policy_instance(
    policy: &PolicyTable,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    x0: f64,
    n_paths: usize,
) -> Result<(), EvalError> {
    market
        .validate()
        .map_err(|e| EvalError::Validation(e.to_string()))?;
    if n_paths == 0 {
        return Err(EvalError::Validation("need at least one path".into()));
    }
    if !(x0 >= 0.0) || !x0.is_finite() {
        return Err(EvalError::Validation(format!(
            "initial wealth must be non-negative and finite, got {x0}"
        )));
    }
    if policy.t_grid().len() != table.len()
        || (policy.dt() - table.dt()).abs() > 1e-12 * table.dt().abs().max(1.0)
    {
        return Err(EvalError::Validation(
            "policy time grid does not match the mortality table".into(),
        ));
    }
    if policy.kind() != kind {
        return Err(EvalError::Validation(format!(
            "policy was solved for {}, evaluation requested {}",
            policy.kind(),
            kind
        )));
    }
    Ok(())
}

/// Runs one market path and returns `(realized gain, below, above)` clamp
/// counts. One standard normal is consumed per time step in all fund kinds,
/// so a path index sees the same market scenario everywhere.
#[allow(clippy::too_many_arguments)]
fn simulate_path_gain(
    policy: &PolicyTable,
    prefs: &PreferenceSpec,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    x0: f64,
    seed: u64,
    path: u64,
) -> Result<(f64, u64, u64), EvalError> {
    let nt = table.len();
    let dt = table.dt();
    let mut shocks = NormalSource::new(stream_rng(seed, SHOCK_STREAM_BASE + path));
    let (x_lo, x_hi) = {
        let xs = policy.wealth_grid();
        (xs[0], xs[xs.len() - 1])
    };
    let mut below = 0u64;
    let mut above = 0u64;
    let mut clamp_check = |x: f64| {
        if x > 0.0 && x < x_lo {
            below += 1;
        } else if x > x_hi {
            above += 1;
        }
    };

    let gain = match kind {
        FundKind::Individual | FundKind::CollectiveInfinite => {
            let pooled = kind == FundKind::CollectiveInfinite;
            let mut x = x0;
            let mut run = 0.0;
            let mut sats = Vec::with_capacity(nt);
            for i in 0..nt {
                clamp_check(x);
                let g = policy.gamma_at(i, 1, x);
                run += prefs.utility_u(g, i) * dt;
                sats.push(run);
                let pi = policy.pi_at(i, 1, x);
                let lr = log_return_params(market, pi, dt);
                let z = shocks.next_normal();
                if i + 1 < nt {
                    let growth = (lr.mean + lr.sd * z).exp();
                    let s = table.one_period_survival_at(i);
                    x = if pooled {
                        if s > 0.0 {
                            (x - g * dt) * growth / s
                        } else {
                            0.0
                        }
                    } else {
                        (x - g * dt) * growth
                    };
                }
            }
            mixture_of_satisfactions(prefs, table.p(), &sats)?
        }
        FundKind::CollectiveFinite { n } => {
            let mut deaths = stream_rng(seed, DEATH_STREAM_BASE + path);
            let mut x = x0;
            let mut m = n;
            let mut run = 0.0;
            for i in 0..nt {
                clamp_check(x);
                let g = policy.gamma_at(i, m, x);
                run += prefs.utility_u(g, i) * dt;
                let s = table.one_period_survival_at(i);
                let pi = policy.pi_at(i, m, x);
                let lr = log_return_params(market, pi, dt);
                let z = shocks.next_normal();
                let self_survives = deaths.gen::<f64>() < s;
                if !self_survives {
                    break;
                }
                let mut co_survivors = 0usize;
                for _ in 0..m - 1 {
                    if deaths.gen::<f64>() < s {
                        co_survivors += 1;
                    }
                }
                if i + 1 < nt {
                    let growth = (lr.mean + lr.sd * z).exp();
                    let survivors = co_survivors + 1;
                    x = (x - g * dt) * growth * m as f64 / survivors as f64;
                    m = survivors;
                }
            }
            match prefs {
                PreferenceSpec::Km(_) => km_gain_weighted(std::iter::once((1.0, run)))?,
                PreferenceSpec::Vnm(_) => run,
            }
        }
    };
    Ok((gain, below, above))
}

/// Consumption trajectories simulated under a policy, with per-time alive
/// indicators (1 while the representative member consumes, 0 after a sampled
/// death). Analytic-death kinds are alive for the whole grid.
#[derive(Debug, Clone)]
pub struct ConsumptionPaths {
    /// `consumption[p][i]`: rate consumed by path `p` at grid time `i`.
    pub consumption: Vec<Vec<f64>>,
    /// `alive[p][i] > 0` iff the consumption entry is defined.
    pub alive: Vec<Vec<f64>>,
    pub clamped_below: u64,
    pub clamped_above: u64,
}

/// Simulates consumption paths for fan diagrams using the same shock
/// substreams as [`mc_gain`], so the fan and the gain estimate describe the
/// same scenarios.
#[allow(clippy::too_many_arguments)]
pub fn simulate_consumption_paths(
    policy: &PolicyTable,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    x0: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ConsumptionPaths, EvalError> {
    let kind = kind.resolve()?;
    check_policy_instance(policy, market, table, kind, x0, n_paths)?;
    let nt = table.len();
    let dt = table.dt();
    let rows: Vec<(Vec<f64>, Vec<f64>, u64, u64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let path = p as u64;
            let mut shocks = NormalSource::new(stream_rng(seed, SHOCK_STREAM_BASE + path));
            let xs = policy.wealth_grid();
            let (x_lo, x_hi) = (xs[0], xs[xs.len() - 1]);
            let mut below = 0u64;
            let mut above = 0u64;
            let mut consumption = vec![0.0f64; nt];
            let mut alive = vec![0.0f64; nt];
            match kind {
                FundKind::Individual | FundKind::CollectiveInfinite => {
                    let pooled = kind == FundKind::CollectiveInfinite;
                    let mut x = x0;
                    for i in 0..nt {
                        if x > 0.0 && x < x_lo {
                            below += 1;
                        } else if x > x_hi {
                            above += 1;
                        }
                        let g = policy.gamma_at(i, 1, x);
                        consumption[i] = g;
                        alive[i] = 1.0;
                        let pi = policy.pi_at(i, 1, x);
                        let lr = log_return_params(market, pi, dt);
                        let z = shocks.next_normal();
                        if i + 1 < nt {
                            let growth = (lr.mean + lr.sd * z).exp();
                            let s = table.one_period_survival_at(i);
                            x = if pooled {
                                if s > 0.0 {
                                    (x - g * dt) * growth / s
                                } else {
                                    0.0
                                }
                            } else {
                                (x - g * dt) * growth
                            };
                        }
                    }
                }
                FundKind::CollectiveFinite { n } => {
                    let mut deaths = stream_rng(seed, DEATH_STREAM_BASE + path);
                    let mut x = x0;
                    let mut m = n;
                    for i in 0..nt {
                        if x > 0.0 && x < x_lo {
                            below += 1;
                        } else if x > x_hi {
                            above += 1;
                        }
                        let g = policy.gamma_at(i, m, x);
                        consumption[i] = g;
                        alive[i] = 1.0;
                        let s = table.one_period_survival_at(i);
                        let pi = policy.pi_at(i, m, x);
                        let lr = log_return_params(market, pi, dt);
                        let z = shocks.next_normal();
                        let self_survives = deaths.gen::<f64>() < s;
                        if !self_survives {
                            break;
                        }
                        let mut co_survivors = 0usize;
                        for _ in 0..m - 1 {
                            if deaths.gen::<f64>() < s {
                                co_survivors += 1;
                            }
                        }
                        if i + 1 < nt {
                            let growth = (lr.mean + lr.sd * z).exp();
                            let survivors = co_survivors + 1;
                            x = (x - g * dt) * growth * m as f64 / survivors as f64;
                            m = survivors;
                        }
                    }
                }
            }
            (consumption, alive, below, above)
        })
        .collect();
    let mut consumption = Vec::with_capacity(n_paths);
    let mut alive = Vec::with_capacity(n_paths);
    let mut clamped_below = 0;
    let mut clamped_above = 0;
    for (c, a, cb, ca) in rows {
        consumption.push(c);
        alive.push(a);
        clamped_below += cb;
        clamped_above += ca;
    }
    Ok(ConsumptionPaths {
        consumption,
        alive,
        clamped_below,
        clamped_above,
    })
}

/// Per-time 5/50/95 percentile curves over alive paths, plus the
/// illustrative path (index 0) and the in-sample path count at each time.
#[derive(Debug, Clone, PartialEq)]
pub struct FanStatistics {
    pub p5: Vec<f64>,
    pub p50: Vec<f64>,
    pub p95: Vec<f64>,
    /// Path index 0, masked to NaN where it is not alive.
    pub sample: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Computes fan percentiles (linear interpolation between order statistics)
/// at each grid time over the paths whose `alive` weight is positive there.
/// Times with no alive path get NaN percentiles and count 0.
pub fn fan_statistics(
    consumption_paths: &[Vec<f64>],
    alive_weights: &[Vec<f64>],
) -> Result<FanStatistics, EvalError> {
    let n_paths = consumption_paths.len();
    if n_paths < 2 {
        return Err(EvalError::Validation(format!(
            "fan statistics need at least 2 paths, got {n_paths}"
        )));
    }
    if alive_weights.len() != n_paths {
        return Err(EvalError::Validation(
            "alive weights must cover every path".into(),
        ));
    }
    let nt = consumption_paths[0].len();
    if nt == 0 {
        return Err(EvalError::Validation("paths are empty".into()));
    }
    for (c, a) in consumption_paths.iter().zip(alive_weights) {
        if c.len() != nt || a.len() != nt {
            return Err(EvalError::Validation(
                "ragged path matrix: all paths must share the grid".into(),
            ));
        }
    }
    if n_paths < FAN_STABLE_PATHS {
        log::warn!(
            "fan percentiles over only {n_paths} paths (fewer than {FAN_STABLE_PATHS}) may be unstable"
        );
    }
    let mut p5 = Vec::with_capacity(nt);
    let mut p50 = Vec::with_capacity(nt);
    let mut p95 = Vec::with_capacity(nt);
    let mut counts = Vec::with_capacity(nt);
    let mut pool = Vec::with_capacity(n_paths);
    for i in 0..nt {
        pool.clear();
        for (c, a) in consumption_paths.iter().zip(alive_weights) {
            if a[i] > 0.0 {
                if c[i].is_nan() {
                    return Err(EvalError::Validation(format!(
                        "alive path has NaN consumption at index {i}"
                    )));
                }
                pool.push(c[i]);
            }
        }
        counts.push(pool.len());
        if pool.is_empty() {
            p5.push(f64::NAN);
            p50.push(f64::NAN);
            p95.push(f64::NAN);
            continue;
        }
        pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p5.push(percentile_sorted(&pool, 0.05));
        p50.push(percentile_sorted(&pool, 0.50));
        p95.push(percentile_sorted(&pool, 0.95));
    }
    let sample = consumption_paths[0]
        .iter()
        .zip(&alive_weights[0])
        .map(|(&c, &a)| if a > 0.0 { c } else { f64::NAN })
        .collect();
    Ok(FanStatistics {
        p5,
        p50,
        p95,
        sample,
        counts,
    })
}

/// Percentile of an ascending slice with linear interpolation between the
/// two nearest order statistics.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let k = sorted.len();
    if k == 1 {
        return sorted[0];
    }
    let pos = q * (k - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(k - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}
