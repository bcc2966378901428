//! Dynamic-programming solvers for optimal consumption and investment over
//! a random lifetime, for an individual account, an infinite collective, and
//! finite collectives of up to [`FundKind::N_MAX`] members.
//!
//! State is wealth per surviving member (plus the survivor count for finite
//! collectives). Decisions each period are a consumption rate `γ` with
//! `0 ≤ γ·δt ≤ x` and a risky-asset fraction `π` on a fixed grid. Backward
//! induction runs on a log- (or linearly) spaced wealth grid with monotone
//! cubic value interpolation; expectations over returns use Gauss–Hermite
//! quadrature and, for finite collectives, an exact binomial mixture over the
//! number of surviving co-members.

mod engine;
mod evaluate;
mod ez;
mod golden;
mod oracle;
mod transition;

pub use engine::solve_km;
pub use evaluate::{evaluate_policy, evaluate_schedule};
pub use ez::{solve_ez_homogeneous, EzSolution};
pub use golden::maximize_1d;
pub use oracle::brute_force_oracle;
pub(crate) use transition::binomial_pmf;

use crate::mortality::MortalityTable;
use crate::prefs::{PreferenceSpec, PrefsError};
use thiserror::Error;

/// Relative tolerance on the optimization objective.
pub const OBJ_REL_TOL: f64 = 1e-8;

/// Finite stand-in for −∞ so value arrays stay interpolation-safe.
pub(crate) const VALUE_FLOOR: f64 = -1e250;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("non-finite value at t = {t}, x = {x}: {detail}")]
    NonFinite { t: f64, x: f64, detail: String },
    #[error("instance too large for the brute-force oracle: {0}")]
    OracleTooLarge(String),
    #[error(
        "infeasible policy at t = {t}, x = {x}, survivors = {m}: consumption rate {gamma} would spend {spend} > wealth"
    )]
    InfeasiblePolicy {
        t: f64,
        x: f64,
        m: usize,
        gamma: f64,
        spend: f64,
    },
    #[error("aggregator recursion diverged at step {step} (t = {t}): {detail}")]
    Divergent { step: usize, t: f64, detail: String },
    #[error(transparent)]
    Prefs(#[from] PrefsError),
}

/// Wealth-grid spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Log,
    Linear,
}

/// Discretization controls for the grid solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub wealth_min: f64,
    pub wealth_max: f64,
    pub n_wealth: usize,
    pub spacing: Spacing,
    /// Coarse scan points for the consumption search (golden refinement runs
    /// inside the best scan bracket).
    pub n_consumption: usize,
    /// Risky-fraction grid size; decisions use exactly these grid values.
    pub n_pi: usize,
    pub pi_bounds: (f64, f64),
    /// Gauss–Hermite nodes for one-period return expectations.
    pub quadrature_k: usize,
}

impl GridConfig {
    /// Default grid for a fund starting at budget `x0`: 400 log-spaced wealth
    /// nodes on `[x0/100, x0·50]`.
    pub fn for_budget(x0: f64) -> Self {
        Self {
            wealth_min: x0 / 100.0,
            wealth_max: x0 * 50.0,
            n_wealth: 400,
            spacing: Spacing::Log,
            n_consumption: 16,
            n_pi: 33,
            pi_bounds: (0.0, 1.0),
            quadrature_k: 9,
        }
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if self.n_wealth < 16 {
            return Err(DpError::Config(format!(
                "need at least 16 wealth nodes, got {}",
                self.n_wealth
            )));
        }
        if !(self.wealth_min < self.wealth_max) || !self.wealth_max.is_finite() {
            return Err(DpError::Config(format!(
                "wealth bounds must satisfy min < max, got [{}, {}]",
                self.wealth_min, self.wealth_max
            )));
        }
        if self.spacing == Spacing::Log && !(self.wealth_min > 0.0) {
            return Err(DpError::Config(format!(
                "log spacing needs wealth_min > 0, got {}",
                self.wealth_min
            )));
        }
        if self.spacing == Spacing::Linear && self.wealth_min < 0.0 {
            return Err(DpError::Config(format!(
                "wealth_min must be non-negative, got {}",
                self.wealth_min
            )));
        }
        if self.n_consumption < 4 {
            return Err(DpError::Config(format!(
                "need at least 4 consumption scan points, got {}",
                self.n_consumption
            )));
        }
        if self.n_pi < 1 {
            return Err(DpError::Config("need at least 1 risky-fraction grid point".into()));
        }
        let (lo, hi) = self.pi_bounds;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(DpError::Config(format!(
                "risky-fraction bounds must be finite with lo ≤ hi, got [{lo}, {hi}]"
            )));
        }
        if self.quadrature_k < 1 {
            return Err(DpError::Config("need at least 1 quadrature node".into()));
        }
        Ok(())
    }

    /// The wealth grid induced by this configuration.
    pub fn wealth_grid(&self) -> Vec<f64> {
        let n = self.n_wealth;
        match self.spacing {
            Spacing::Log => {
                let z0 = self.wealth_min.ln();
                let h = (self.wealth_max / self.wealth_min).ln() / (n - 1) as f64;
                let mut xs: Vec<f64> = (0..n).map(|j| (z0 + h * j as f64).exp()).collect();
                // Pin the endpoints to remove round-trip noise.
                xs[0] = self.wealth_min;
                xs[n - 1] = self.wealth_max;
                xs
            }
            Spacing::Linear => {
                let h = (self.wealth_max - self.wealth_min) / (n - 1) as f64;
                let mut xs: Vec<f64> = (0..n).map(|j| self.wealth_min + h * j as f64).collect();
                xs[0] = self.wealth_min;
                xs[n - 1] = self.wealth_max;
                xs
            }
        }
    }

    /// The risky-fraction grid.
    pub fn pi_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.pi_bounds;
        if self.n_pi == 1 || lo == hi {
            return vec![lo];
        }
        let h = (hi - lo) / (self.n_pi - 1) as f64;
        let mut ps: Vec<f64> = (0..self.n_pi).map(|k| lo + h * k as f64).collect();
        ps[self.n_pi - 1] = hi;
        ps
    }
}

/// The kind of fund being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundKind {
    /// A single account with no mortality pooling.
    Individual,
    /// The infinite-pool limit: mortality credits accrue deterministically.
    CollectiveInfinite,
    /// A collective that starts with `n` members; the survivor count is part
    /// of the state.
    CollectiveFinite { n: usize },
}

impl FundKind {
    /// Largest member count modelled exactly; larger funds use the
    /// infinite-pool limit.
    pub const N_MAX: usize = 50;

    /// Resolves the kind actually solved: finite funds larger than
    /// [`Self::N_MAX`] route to the infinite pool.
    pub fn resolve(self) -> Result<FundKind, DpError> {
        match self {
            FundKind::CollectiveFinite { n } => {
                if n == 0 {
                    Err(DpError::Config(
                        "a finite collective needs at least 1 member".into(),
                    ))
                } else if n > Self::N_MAX {
                    log::info!(
                        "finite collective of {n} members exceeds {}; using the infinite-pool limit",
                        Self::N_MAX
                    );
                    Ok(FundKind::CollectiveInfinite)
                } else {
                    Ok(self)
                }
            }
            other => Ok(other),
        }
    }

    /// Number of survivor-count slices carried in tables for this kind.
    pub fn survivor_dim(&self) -> usize {
        match self {
            FundKind::CollectiveFinite { n } => *n,
            _ => 1,
        }
    }
}

impl std::fmt::Display for FundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FundKind::Individual => write!(f, "individual"),
            FundKind::CollectiveInfinite => write!(f, "collective_infinite"),
            FundKind::CollectiveFinite { n } => write!(f, "collective_{n}"),
        }
    }
}

/// Solver diagnostics: continuation-evaluation clamp counts and warnings.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Continuation lookups below the wealth grid (bridged linearly to the
    /// exact zero-wealth value).
    pub clamped_below: u64,
    /// Continuation lookups above the wealth grid (clamped to the top node).
    pub clamped_above: u64,
    pub warnings: Vec<String>,
}

/// Shared geometry of policy and value tables.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TableGeometry {
    pub t_grid: Vec<f64>,
    pub dt: f64,
    pub wealth: Vec<f64>,
    pub spacing: Spacing,
    pub kind: FundKind,
    pub m_count: usize,
    /// Quadrature order the producing solve used; evaluation reuses it so
    /// both sides compute identical expectations.
    pub quadrature_k: usize,
}

impl TableGeometry {
    pub fn idx(&self, i: usize, m: usize, j: usize) -> usize {
        debug_assert!((1..=self.m_count).contains(&m));
        (i * self.m_count + (m - 1)) * self.wealth.len() + j
    }

    /// Locate `x` for linear interpolation: `(j, w)` such that the value is
    /// `(1−w)·v[j] + w·v[j+1]`; clamps outside the grid.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let xs = &self.wealth;
        let n = xs.len();
        if x <= xs[0] {
            return (0, 0.0);
        }
        if x >= xs[n - 1] {
            return (n - 2, 1.0);
        }
        let j = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(j) => return (j.min(n - 2), if j == n - 1 { 1.0 } else { 0.0 }),
            Err(j) => j - 1,
        };
        let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
        (j, w)
    }
}

/// Optimal decisions on the grid: consumption rate `γ(t, x[, m])` and risky
/// fraction `π(t, x[, m])`, with `0 ≤ γ·δt ≤ x` at every node. Lookups
/// interpolate linearly (hence monotonically) in wealth; below the lowest
/// node consumption bridges linearly to `γ(0) = 0`, above the highest node
/// values are clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub(crate) geom: TableGeometry,
    pub(crate) gamma: Vec<f64>,
    pub(crate) pi: Vec<f64>,
}

impl PolicyTable {
    pub fn t_grid(&self) -> &[f64] {
        &self.geom.t_grid
    }

    pub fn dt(&self) -> f64 {
        self.geom.dt
    }

    pub fn wealth_grid(&self) -> &[f64] {
        &self.geom.wealth
    }

    pub fn kind(&self) -> FundKind {
        self.geom.kind
    }

    /// Number of survivor-count slices (1 unless the fund is finite).
    pub fn survivor_count(&self) -> usize {
        self.geom.m_count
    }

    /// Quadrature order used by the solve that produced this table.
    pub fn quadrature_k(&self) -> usize {
        self.geom.quadrature_k
    }

    fn lookup(&self, data: &[f64], i: usize, m: usize, x: f64) -> f64 {
        let xs = &self.geom.wealth;
        if x <= 0.0 {
            return 0.0;
        }
        if x < xs[0] {
            // Bridge to the zero-wealth decision (both γ and π vanish there).
            return data[self.geom.idx(i, m, 0)] * (x / xs[0]);
        }
        let (j, w) = self.geom.locate(x);
        let lo = data[self.geom.idx(i, m, j)];
        let hi = data[self.geom.idx(i, m, j + 1)];
        lo + (hi - lo) * w
    }

    /// Consumption rate at time index `i`, survivor count `m`, wealth `x`.
    pub fn gamma_at(&self, i: usize, m: usize, x: f64) -> f64 {
        let g = self.lookup(&self.gamma, i, m, x);
        // Interpolation preserves feasibility, but guard against rounding.
        g.min(x / self.geom.dt).max(0.0)
    }

    /// Risky fraction at time index `i`, survivor count `m`, wealth `x`.
    pub fn pi_at(&self, i: usize, m: usize, x: f64) -> f64 {
        if x <= 0.0 {
            // Convention: no risky exposure decision matters at zero wealth;
            // report the stored bottom-node value.
            return self.pi[self.geom.idx(i, m, 0)];
        }
        if x < self.geom.wealth[0] {
            return self.pi[self.geom.idx(i, m, 0)];
        }
        let (j, w) = self.geom.locate(x);
        let lo = self.pi[self.geom.idx(i, m, j)];
        let hi = self.pi[self.geom.idx(i, m, j + 1)];
        lo + (hi - lo) * w
    }

    /// Raw node value (no interpolation).
    pub fn gamma_node(&self, i: usize, m: usize, j: usize) -> f64 {
        self.gamma[self.geom.idx(i, m, j)]
    }

    pub fn pi_node(&self, i: usize, m: usize, j: usize) -> f64 {
        self.pi[self.geom.idx(i, m, j)]
    }
}

/// The optimal value on the grid, `W(t, x[, m])`, plus the exact value of the
/// absorbing zero-wealth state per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub(crate) geom: TableGeometry,
    pub(crate) value: Vec<f64>,
    /// Value of the zero-wealth state, `[i][m]`.
    pub(crate) value_zero: Vec<f64>,
}

impl ValueFunction {
    pub fn t_grid(&self) -> &[f64] {
        &self.geom.t_grid
    }

    pub fn wealth_grid(&self) -> &[f64] {
        &self.geom.wealth
    }

    pub fn kind(&self) -> FundKind {
        self.geom.kind
    }

    pub fn survivor_count(&self) -> usize {
        self.geom.m_count
    }

    /// Raw node value (no interpolation).
    pub fn value_node(&self, i: usize, m: usize, j: usize) -> f64 {
        self.value[self.geom.idx(i, m, j)]
    }

    /// Value at arbitrary wealth by linear interpolation (clamped above the
    /// grid, bridged to the zero-wealth value below it).
    pub fn value_at(&self, i: usize, m: usize, x: f64) -> f64 {
        let zero = self.value_zero[i * self.geom.m_count + (m - 1)];
        if x <= 0.0 {
            return zero;
        }
        let xs = &self.geom.wealth;
        if x < xs[0] {
            let v0 = self.value[self.geom.idx(i, m, 0)];
            return zero + (v0 - zero) * (x / xs[0]);
        }
        let (j, w) = self.geom.locate(x);
        let lo = self.value[self.geom.idx(i, m, j)];
        let hi = self.value[self.geom.idx(i, m, j + 1)];
        lo + (hi - lo) * w
    }

    pub fn value_at_zero(&self, i: usize, m: usize) -> f64 {
        self.value_zero[i * self.geom.m_count + (m - 1)]
    }
}

/// Everything a grid solve produces.
#[derive(Debug, Clone)]
pub struct Solution {
    pub policy: PolicyTable,
    pub value: ValueFunction,
    pub diagnostics: Diagnostics,
}

impl Solution {
    /// Rows of the solution in CSV order: `(t, x, m, gamma, pi, value)`.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, usize, f64, f64, f64)> + '_ {
        let geom = &self.policy.geom;
        let nt = geom.t_grid.len();
        let nm = geom.m_count;
        let nx = geom.wealth.len();
        (0..nt).flat_map(move |i| {
            (1..=nm).flat_map(move |m| {
                (0..nx).map(move |j| {
                    (
                        geom.t_grid[i],
                        geom.wealth[j],
                        m,
                        self.policy.gamma_node(i, m, j),
                        self.policy.pi_node(i, m, j),
                        self.value.value_node(i, m, j),
                    )
                })
            })
        })
    }
}

/// Combines period utility, survival and continuation into the exponential
/// (KM) Bellman value `e^{−u·δt}·(−(1−s) + s·cont)`, evaluated in log space.
pub(crate) fn km_combine(u: f64, dt: f64, s: f64, cont: f64) -> f64 {
    if u == f64::NEG_INFINITY {
        return VALUE_FLOOR;
    }
    // cont is an expectation of values in (−∞, 0); the bracket is ≤ 0.
    let bracket = -(1.0 - s) + s * cont.max(VALUE_FLOOR);
    if !(bracket < 0.0) {
        // Numerically exhausted continuation (underflow to −0): the value is
        // an essentially perfect −0; keep a tiny magnitude.
        return -1e-300;
    }
    let log_mag = -u * dt + (-bracket).ln();
    if log_mag >= 700.0 {
        return VALUE_FLOOR;
    }
    let v = -log_mag.exp();
    if v == 0.0 {
        -1e-300
    } else {
        v
    }
}

/// Additive (vNM) Bellman value `u·δt + s·cont`.
pub(crate) fn vnm_combine(u: f64, dt: f64, s: f64, cont: f64) -> f64 {
    if u == f64::NEG_INFINITY {
        return VALUE_FLOOR;
    }
    (u * dt + s * cont).max(VALUE_FLOOR)
}

pub(crate) fn combine(prefs: &PreferenceSpec, u: f64, dt: f64, s: f64, cont: f64) -> f64 {
    match prefs {
        PreferenceSpec::Km(_) => km_combine(u, dt, s, cont),
        PreferenceSpec::Vnm(_) => vnm_combine(u, dt, s, cont),
    }
}

/// Validates that preference schedules cover the mortality grid.
pub(crate) fn validate_prefs_grid(
    prefs: &PreferenceSpec,
    table: &MortalityTable,
) -> Result<(), DpError> {
    if let PreferenceSpec::Km(km) = prefs {
        if km.schedules.len() != table.len() {
            return Err(DpError::Config(format!(
                "income schedules have {} points but the mortality grid has {}",
                km.schedules.len(),
                table.len()
            )));
        }
    }
    Ok(())
}
