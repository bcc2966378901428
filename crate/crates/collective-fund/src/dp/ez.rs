//! Scalar recursion for homogeneous Epstein–Zin preferences.
//!
//! The aggregator is homogeneous of degree one in consumption, so with a
//! wealth-proportional policy the value is `Z(t, x) = k_t·x` and the
//! Bellman recursion collapses to scalars:
//!
//! `k_t = max_{c, π} [ c^ρ + β·k_{t+1}^ρ·(1−c)^ρ·G_t(π) ]^{1/ρ}`,
//! `G_t(π) = (s_t·E[R(π)^α])^{ρ/α} / ŝ_t^ρ`,
//!
//! with `ŝ_t = 1` for an individual account and `ŝ_t = s_t` for the infinite
//! collective (mortality credits scale post-consumption wealth by `R/ŝ`).
//! The optimal risky fraction maximizes the certainty equivalent
//! `E[R^α]^{1/α}` and is therefore the same at every step; the optimal
//! consumption fraction has the closed form `c* = 1/(1 + A^{1/(1−ρ)})` for
//! `A = β·k_{t+1}^ρ·G_t(π*)`. In the final period everything is consumed
//! (`c = 1`, `k = 1`).

use super::golden::maximize_1d;
use super::{DpError, FundKind};
use crate::market::{return_nodes, MarketParams};
use crate::mortality::MortalityTable;
use crate::prefs::EZPreferences;

/// Scan points for the risky-fraction search (golden refinement follows).
const PI_SCAN: usize = 65;
const PI_TOL: f64 = 1e-12;

/// Consumption fractions, certainty-equivalent multiples and the risky
/// fraction of the homogeneous Epstein–Zin solution.
#[derive(Debug, Clone, PartialEq)]
pub struct EzSolution {
    pub t_grid: Vec<f64>,
    /// Value multiple: `Z(t, x) = k[t]·x`.
    pub k: Vec<f64>,
    /// Consumption fraction of wealth per period, in `(0, 1]`.
    pub c: Vec<f64>,
    /// Risky fraction per period (constant by construction).
    pub pi: Vec<f64>,
}

/// Solves the homogeneous Epstein–Zin problem for an individual account or
/// the infinite collective. `pi_bounds` constrains the risky fraction and
/// `quadrature_k` sets the return-expectation accuracy.
pub fn solve_ez_homogeneous(
    prefs: &EZPreferences,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    pi_bounds: (f64, f64),
    quadrature_k: usize,
) -> Result<EzSolution, DpError> {
    market
        .validate()
        .map_err(|e| DpError::Config(e.to_string()))?;
    let kind = kind.resolve()?;
    let pooled = match kind {
        FundKind::Individual => false,
        FundKind::CollectiveInfinite => true,
        FundKind::CollectiveFinite { .. } => {
            return Err(DpError::Config(
                "homogeneous aggregation needs an individual account or the infinite collective; finite collectives require the grid solver".into(),
            ))
        }
    };
    let (pi_lo, pi_hi) = pi_bounds;
    if !pi_lo.is_finite() || !pi_hi.is_finite() || pi_lo > pi_hi {
        return Err(DpError::Config(format!(
            "risky-fraction bounds must be finite with lo ≤ hi, got [{pi_lo}, {pi_hi}]"
        )));
    }
    if quadrature_k < 1 {
        return Err(DpError::Config("need at least 1 quadrature node".into()));
    }
    let dt = table.dt();
    let nt = table.len();
    let alpha = prefs.alpha;
    let rho = prefs.rho;

    // The optimal π maximizes E[R^α]^{1/α}, independent of time and wealth.
    let ce = |pi: f64| -> f64 {
        match return_nodes(market, pi, dt, quadrature_k) {
            Ok(q) => q.expected_power(alpha).powf(1.0 / alpha),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let best = maximize_1d(pi_lo, pi_hi, PI_SCAN, PI_TOL, ce);
    let pi_star = best.arg;
    let e_r_alpha = return_nodes(market, pi_star, dt, quadrature_k)
        .map_err(|e| DpError::Config(e.to_string()))?
        .expected_power(alpha);
    if !(e_r_alpha > 0.0) || !e_r_alpha.is_finite() {
        return Err(DpError::Config(format!(
            "E[R^α] must be positive and finite, got {e_r_alpha}"
        )));
    }

    let mut k = vec![0.0f64; nt];
    let mut c = vec![0.0f64; nt];
    let mut k_next = 1.0f64;
    for i in (0..nt).rev() {
        let s = table.one_period_survival_at(i);
        let (ki, ci) = if i == nt - 1 || s <= 0.0 {
            (1.0, 1.0)
        } else {
            let s_hat = if pooled { s } else { 1.0 };
            let g = (s * e_r_alpha).powf(rho / alpha) / s_hat.powf(rho);
            let a = prefs.beta * k_next.powf(rho) * g;
            if !a.is_finite() || !(a > 0.0) {
                return Err(DpError::Divergent {
                    step: i,
                    t: table.t_grid()[i],
                    detail: format!("future weight A = {a}"),
                });
            }
            let ci = 1.0 / (1.0 + a.powf(1.0 / (1.0 - rho)));
            let ki = (ci.powf(rho) + a * (1.0 - ci).powf(rho)).powf(1.0 / rho);
            (ki, ci)
        };
        if !ki.is_finite() || !(ki > 0.0) {
            return Err(DpError::Divergent {
                step: i,
                t: table.t_grid()[i],
                detail: format!("certainty-equivalent multiple k = {ki}"),
            });
        }
        k[i] = ki;
        c[i] = ci;
        k_next = ki;
    }

    Ok(EzSolution {
        t_grid: table.t_grid().to_vec(),
        k,
        c,
        pi: vec![pi_star; nt],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mortality::MortalityTable;
    use approx::assert_relative_eq;

    fn certain_life(n: usize) -> MortalityTable {
        // Survive each period with certainty, die after the last.
        let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut p = vec![0.0; n];
        p[n - 1] = 1.0;
        MortalityTable::new(t, p).unwrap()
    }

    #[test]
    fn terminal_step_consumes_all() {
        let table = certain_life(1);
        let prefs = EZPreferences::new(-1.0, -1.0, 0.9).unwrap();
        let market = MarketParams::new(0.0, 0.0, 0.0).unwrap();
        let sol =
            solve_ez_homogeneous(&prefs, &market, &table, FundKind::Individual, (0.0, 1.0), 9)
                .unwrap();
        assert_eq!(sol.c, vec![1.0]);
        assert_eq!(sol.k, vec![1.0]);
    }

    #[test]
    fn deterministic_three_periods_match_grid_search() {
        // σ = 0, certain 3-period life: verify c_t against a brute-force
        // search over consumption fractions through the same recursion.
        let table = certain_life(3);
        let prefs = EZPreferences::new(-1.0, -1.0, 0.92).unwrap();
        let market = MarketParams::new(0.03, 0.03, 0.0).unwrap();
        let sol =
            solve_ez_homogeneous(&prefs, &market, &table, FundKind::Individual, (0.0, 1.0), 9)
                .unwrap();
        assert_eq!(sol.c[2], 1.0);
        let r = (0.03f64).exp();
        let g = r.powf(prefs.rho); // (s·E[R^α])^{ρ/α} with s = 1, σ = 0
        let mut k_next = 1.0f64;
        for i in (0..2).rev() {
            let a = prefs.beta * k_next.powf(prefs.rho) * g;
            let brute = maximize_1d(1e-9, 1.0 - 1e-9, 4001, 1e-14, |c| {
                let inner = c.powf(prefs.rho) + a * (1.0 - c).powf(prefs.rho);
                inner.powf(1.0 / prefs.rho)
            });
            assert_relative_eq!(sol.c[i], brute.arg, epsilon = 1e-5);
            k_next = (sol.c[i].powf(prefs.rho)
                + a * (1.0 - sol.c[i]).powf(prefs.rho))
            .powf(1.0 / prefs.rho);
            assert_relative_eq!(sol.k[i], k_next, max_relative = 1e-12);
        }
    }

    #[test]
    fn risky_fraction_is_merton_like() {
        // α = −1 power investor: π* ≈ (μ−r)/((1−α)σ²), interior.
        let table = certain_life(2);
        let prefs = EZPreferences::new(-1.0, -0.5, 1.0).unwrap();
        let market = MarketParams::new(0.01, 0.05, 0.2).unwrap();
        let sol =
            solve_ez_homogeneous(&prefs, &market, &table, FundKind::Individual, (0.0, 1.0), 9)
                .unwrap();
        let merton = (0.05 - 0.01) / (2.0 * 0.04);
        assert_relative_eq!(sol.pi[0], merton, max_relative = 0.05);
    }

    #[test]
    fn pooling_shifts_consumption_up() {
        // With mortality, the infinite collective can consume more early
        // because survivors inherit the estates.
        let table = MortalityTable::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let prefs = EZPreferences::new(-1.0, -1.0, 1.0).unwrap();
        let market = MarketParams::new(0.02, 0.02, 0.0).unwrap();
        let ind =
            solve_ez_homogeneous(&prefs, &market, &table, FundKind::Individual, (0.0, 1.0), 9)
                .unwrap();
        let inf = solve_ez_homogeneous(
            &prefs,
            &market,
            &table,
            FundKind::CollectiveInfinite,
            (0.0, 1.0),
            9,
        )
        .unwrap();
        assert!(
            inf.c[0] > ind.c[0],
            "pooled {} vs individual {}",
            inf.c[0],
            ind.c[0]
        );
        assert!(inf.k[0] > ind.k[0], "pooling must raise the value multiple");
    }

    #[test]
    fn finite_kind_is_rejected() {
        let table = certain_life(2);
        let prefs = EZPreferences::new(-1.0, -1.0, 1.0).unwrap();
        let market = MarketParams::new(0.0, 0.0, 0.0).unwrap();
        let err = solve_ez_homogeneous(
            &prefs,
            &market,
            &table,
            FundKind::CollectiveFinite { n: 5 },
            (0.0, 1.0),
            9,
        )
        .unwrap_err();
        assert!(matches!(err, DpError::Config(_)));
    }
}
