//! Evaluation of fixed strategies without optimization: grid policy tables
//! (re-running the backward recursion with the table's decisions) and
//! deterministic consumption schedules (exact scalar recursion, as for a
//! purchased annuity).

use super::engine::Util;
use super::transition::{binomial_pmf, direct_continuation, ClampCount, Mixing, NextStep, Tail};
use super::{
    combine, validate_prefs_grid, DpError, FundKind, PolicyTable, Spacing, ValueFunction,
};
use crate::market::{return_nodes, MarketParams, ReturnQuadrature};
use crate::mortality::MortalityTable;
use crate::prefs::PreferenceSpec;
use std::collections::HashMap;

/// Feasibility slack for `γ·δt ≤ x` at table nodes (relative).
const FEASIBILITY_SLACK: f64 = 1e-9;

/// Evaluates a policy table by backward induction, using exactly the stored
/// decisions. The arithmetic matches the solver's definitive value pass term
/// for term, so for a table produced by the solver the returned values agree
/// with the solve's `ValueFunction` to floating-point reproduction.
///
/// Errors if any node's consumption is infeasible (`γ·δt > x`), naming the
/// offending state.
pub fn evaluate_policy(
    policy: &PolicyTable,
    prefs: &PreferenceSpec,
    market: &MarketParams,
    table: &MortalityTable,
) -> Result<ValueFunction, DpError> {
    market
        .validate()
        .map_err(|e| DpError::Config(e.to_string()))?;
    validate_prefs_grid(prefs, table)?;
    let geom = &policy.geom;
    if geom.t_grid.len() != table.len() || (geom.dt - table.dt()).abs() > 1e-12 {
        return Err(DpError::Config(format!(
            "policy grid has {} steps of δt = {} but the mortality grid has {} of δt = {}",
            geom.t_grid.len(),
            geom.dt,
            table.len(),
            table.dt()
        )));
    }
    let kind = geom.kind;
    let m_count = geom.m_count;
    let xs = &geom.wealth;
    let nx = xs.len();
    let log_space = geom.spacing == Spacing::Log;
    let coords: Vec<f64> = if log_space {
        xs.iter().map(|x| x.ln()).collect()
    } else {
        xs.clone()
    };
    let (x_min, x_max) = (xs[0], xs[nx - 1]);
    let nt = geom.t_grid.len();
    let dt = geom.dt;

    // Feasibility check up front so errors name states, not NaNs.
    for i in 0..nt {
        for m in 1..=m_count {
            for j in 0..nx {
                let g = policy.gamma_node(i, m, j);
                let x = xs[j];
                if !(g >= 0.0) || g * dt > x * (1.0 + FEASIBILITY_SLACK) {
                    return Err(DpError::InfeasiblePolicy {
                        t: geom.t_grid[i],
                        x,
                        m,
                        gamma: g,
                        spend: g * dt,
                    });
                }
            }
        }
    }

    let mut value_all = vec![0.0f64; nt * m_count * nx];
    let mut zero_all = vec![0.0f64; nt * m_count];
    let mut value_next = vec![0.0f64; m_count * nx];
    let mut w0_next = vec![0.0f64; m_count];
    // Stored risky fractions come from a small grid; cache their quadratures.
    let mut quad_cache: HashMap<u64, ReturnQuadrature> = HashMap::new();

    for i in (0..nt).rev() {
        let s = table.one_period_survival_at(i);
        let util = Util::build(prefs, i);
        let t_i = geom.t_grid[i];

        if s <= 0.0 {
            for m in 1..=m_count {
                for j in 0..nx {
                    let g = policy.gamma_node(i, m, j);
                    let v = combine(prefs, util.at(g), dt, 0.0, 0.0);
                    value_all[geom.idx(i, m, j)] = v;
                    value_next[(m - 1) * nx + j] = v;
                }
                let z = combine(prefs, util.at(0.0), dt, 0.0, 0.0);
                zero_all[i * m_count + (m - 1)] = z;
                w0_next[m - 1] = z;
            }
            continue;
        }

        let next = NextStep::build(
            &value_next,
            &w0_next,
            m_count,
            &coords,
            log_space,
            x_min,
            x_max,
            Tail::for_prefs(prefs),
        );
        let mixings: Vec<Mixing> = (1..=m_count)
            .map(|m| match kind {
                FundKind::Individual => Mixing::Individual,
                FundKind::CollectiveInfinite => Mixing::Infinite { s },
                FundKind::CollectiveFinite { .. } => {
                    let (b0, probs) = binomial_pmf(m - 1, s);
                    Mixing::Finite { m, b0, probs }
                }
            })
            .collect();

        for m in 1..=m_count {
            let mixing = &mixings[m - 1];
            for j in 0..nx {
                let x = xs[j];
                let g = policy.gamma_node(i, m, j).min(x / dt);
                let pi = policy.pi_node(i, m, j);
                let quad = match quad_cache.entry(pi.to_bits()) {
                    std::collections::hash_map::Entry::Occupied(entry) => entry.into_mut(),
                    std::collections::hash_map::Entry::Vacant(entry) => entry.insert(
                        return_nodes(market, pi, dt, geom.quadrature_k)
                            .map_err(|err| DpError::Config(err.to_string()))?,
                    ),
                };
                let mut clamps = ClampCount::default();
                let cont = direct_continuation(&next, quad, mixing, x - g * dt, &mut clamps);
                let v = combine(prefs, util.at(g), dt, s, cont);
                if v.is_nan() {
                    return Err(DpError::NonFinite {
                        t: t_i,
                        x,
                        detail: "policy value is NaN".into(),
                    });
                }
                value_all[geom.idx(i, m, j)] = v;
            }
        }
        for m in 1..=m_count {
            value_next[(m - 1) * nx..m * nx]
                .copy_from_slice(&value_all[geom.idx(i, m, 0)..geom.idx(i, m, 0) + nx]);
        }

        let mut w0_cur = vec![0.0f64; m_count];
        for m in 1..=m_count {
            let cont0 = match &mixings[m - 1] {
                Mixing::Individual | Mixing::Infinite { .. } => w0_next[0],
                Mixing::Finite { b0, probs, .. } => probs
                    .iter()
                    .enumerate()
                    .map(|(off, &q)| q * w0_next[b0 + off])
                    .sum(),
            };
            let z = combine(prefs, util.at(0.0), dt, s, cont0);
            zero_all[i * m_count + (m - 1)] = z;
            w0_cur[m - 1] = z;
        }
        w0_next = w0_cur;
    }

    Ok(ValueFunction {
        geom: geom.clone(),
        value: value_all,
        value_zero: zero_all,
    })
}

/// Evaluates a deterministic consumption stream paid regardless of wealth —
/// the purchased-annuity case — by the exact scalar recursion over death
/// times. Equals the direct summation `Σ_τ p_τ · g(stream, τ)` of the chosen
/// preference family.
pub fn evaluate_schedule(
    stream: &[f64],
    prefs: &PreferenceSpec,
    table: &MortalityTable,
) -> Result<f64, DpError> {
    validate_prefs_grid(prefs, table)?;
    if stream.len() != table.len() {
        return Err(DpError::Config(format!(
            "consumption stream has {} points but the mortality grid has {}",
            stream.len(),
            table.len()
        )));
    }
    let dt = table.dt();
    let nt = table.len();
    let mut g_next = 0.0f64;
    for i in (0..nt).rev() {
        let s = table.one_period_survival_at(i);
        let u = prefs.utility_u(stream[i], i);
        g_next = match prefs {
            PreferenceSpec::Km(_) => {
                if u == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let bracket = -(1.0 - s) + s * g_next;
                    (-u * dt).exp() * bracket
                }
            }
            PreferenceSpec::Vnm(_) => {
                if u == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    u * dt + s * g_next
                }
            }
        };
    }
    Ok(g_next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{solve_km, GridConfig, Spacing};
    use crate::mortality::{bundled_table, MortalityTable};
    use crate::prefs::{km_gain_weighted, satisfaction, KMPreferences, Schedules};
    use approx::assert_relative_eq;

    fn km_prefs(table: &MortalityTable) -> (PreferenceSpec, KMPreferences) {
        let sched = Schedules::new(0.5, 0.0, 1.5, table.t_grid()).unwrap();
        let km = KMPreferences::new(-1.0, -1.0, sched).unwrap();
        (PreferenceSpec::Km(km.clone()), km)
    }

    #[test]
    fn schedule_recursion_matches_direct_summation() {
        let table = bundled_table();
        let (prefs, km) = km_prefs(&table);
        let stream = vec![0.8; table.len()];
        let via_recursion = evaluate_schedule(&stream, &prefs, &table).unwrap();
        // Direct summation over death times through the preference layer.
        let pairs: Vec<(f64, f64)> = (0..table.len())
            .map(|tau| {
                (
                    table.p()[tau],
                    satisfaction(&km, &stream, tau, table.dt()).unwrap(),
                )
            })
            .collect();
        let direct = km_gain_weighted(pairs.iter().copied()).unwrap();
        assert_relative_eq!(via_recursion, direct, max_relative = 1e-12);
    }

    #[test]
    fn policy_evaluation_reproduces_solver_values() {
        let table = MortalityTable::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let (prefs, _) = km_prefs(&table);
        let market = MarketParams::new(0.02, 0.05, 0.15).unwrap();
        let grid = GridConfig {
            wealth_min: 0.05,
            wealth_max: 20.0,
            n_wealth: 48,
            spacing: Spacing::Log,
            n_consumption: 12,
            n_pi: 5,
            pi_bounds: (0.0, 1.0),
            quadrature_k: 5,
        };
        for kind in [
            FundKind::Individual,
            FundKind::CollectiveInfinite,
            FundKind::CollectiveFinite { n: 6 },
        ] {
            let sol = solve_km(&prefs, &market, &table, kind, &grid).unwrap();
            let revalued = evaluate_policy(&sol.policy, &prefs, &market, &table).unwrap();
            let m_count = sol.policy.survivor_count();
            for i in 0..4 {
                for m in 1..=m_count {
                    for j in 0..grid.n_wealth {
                        assert_relative_eq!(
                            revalued.value_node(i, m, j),
                            sol.value.value_node(i, m, j),
                            max_relative = 1e-9
                        );
                    }
                    assert_relative_eq!(
                        revalued.value_at_zero(i, m),
                        sol.value.value_at_zero(i, m),
                        max_relative = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn infeasible_consumption_is_named() {
        let table = MortalityTable::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let (prefs, _) = km_prefs(&table);
        let market = MarketParams::new(0.0, 0.0, 0.0).unwrap();
        let grid = GridConfig {
            wealth_min: 0.1,
            wealth_max: 10.0,
            n_wealth: 16,
            spacing: Spacing::Log,
            n_consumption: 8,
            n_pi: 2,
            pi_bounds: (0.0, 1.0),
            quadrature_k: 1,
        };
        let sol = solve_km(&prefs, &market, &table, FundKind::Individual, &grid).unwrap();
        let mut policy = sol.policy.clone();
        // Corrupt one node: consume double the wealth.
        let idx = policy.geom.idx(0, 1, 3);
        policy.gamma[idx] = 2.0 * policy.geom.wealth[3] / policy.geom.dt;
        let err = evaluate_policy(&policy, &prefs, &market, &table).unwrap_err();
        match err {
            DpError::InfeasiblePolicy { t, x, m, .. } => {
                assert_eq!(t, 0.0);
                assert_eq!(m, 1);
                assert_relative_eq!(x, policy.geom.wealth[3]);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn schedule_negative_entry_gives_minus_infinity() {
        let table = MortalityTable::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let (prefs, _) = km_prefs(&table);
        let v = evaluate_schedule(&[1.0, -0.2], &prefs, &table).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
    }
}
