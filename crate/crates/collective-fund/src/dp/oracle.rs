//! Exhaustive-search reference solver for tiny instances, used to verify the
//! production optimizer. It shares the solver's interpolation, continuation
//! and combining arithmetic, optimizes over the same decision class (risky
//! fractions restricted to the configured grid), and replaces the scan +
//! golden consumption search with a dense scan plus nested zoom refinement.

use super::engine::Util;
use super::transition::{binomial_pmf, direct_continuation, ClampCount, Mixing, NextStep, Tail};
use super::{
    combine, validate_prefs_grid, Diagnostics, DpError, FundKind, GridConfig, PolicyTable,
    Solution, Spacing, TableGeometry, ValueFunction,
};
use crate::market::{return_nodes, MarketParams, ReturnQuadrature};
use crate::mortality::MortalityTable;
use crate::prefs::PreferenceSpec;

/// Hard caps that keep the exhaustive search affordable.
const MAX_PERIODS: usize = 2;
const MAX_QUADRATURE: usize = 3;
const MAX_WEALTH_NODES: usize = 64;

/// Dense consumption scan size and zoom schedule.
const DENSE_SCAN: usize = 401;
const ZOOM_ROUNDS: usize = 3;
const ZOOM_SCAN: usize = 41;

/// Solves a tiny instance exhaustively. Accepts at most [`MAX_PERIODS`] time
/// steps, [`MAX_QUADRATURE`] return-quadrature nodes and
/// [`MAX_WEALTH_NODES`] wealth nodes, and errors otherwise. The result never
/// exceeds [`super::solve_km`] on the same instance beyond the optimizer
/// tolerance, because both search the same decision class with the same
/// arithmetic.
pub fn brute_force_oracle(
    prefs: &PreferenceSpec,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    grid: &GridConfig,
) -> Result<Solution, DpError> {
    if table.len() > MAX_PERIODS {
        return Err(DpError::OracleTooLarge(format!(
            "{} time steps exceed the {MAX_PERIODS}-step cap",
            table.len()
        )));
    }
    if grid.quadrature_k > MAX_QUADRATURE {
        return Err(DpError::OracleTooLarge(format!(
            "{} quadrature nodes exceed the {MAX_QUADRATURE}-node cap",
            grid.quadrature_k
        )));
    }
    if grid.n_wealth > MAX_WEALTH_NODES {
        return Err(DpError::OracleTooLarge(format!(
            "{} wealth nodes exceed the {MAX_WEALTH_NODES}-node cap",
            grid.n_wealth
        )));
    }
    grid.validate()?;
    market
        .validate()
        .map_err(|e| DpError::Config(e.to_string()))?;
    validate_prefs_grid(prefs, table)?;
    let kind = kind.resolve()?;
    let m_count = kind.survivor_dim();

    let xs = grid.wealth_grid();
    let nx = xs.len();
    let log_space = grid.spacing == Spacing::Log;
    let coords: Vec<f64> = if log_space {
        xs.iter().map(|x| x.ln()).collect()
    } else {
        xs.clone()
    };
    let (x_min, x_max) = (xs[0], xs[nx - 1]);
    let t_grid = table.t_grid().to_vec();
    let nt = t_grid.len();
    let dt = table.dt();
    let pi_grid = grid.pi_grid();
    let quads: Vec<ReturnQuadrature> = pi_grid
        .iter()
        .map(|&pi| return_nodes(market, pi, dt, grid.quadrature_k))
        .collect::<Result<_, _>>()
        .map_err(|e| DpError::Config(e.to_string()))?;

    let geom = TableGeometry {
        t_grid: t_grid.clone(),
        dt,
        wealth: xs.clone(),
        spacing: grid.spacing,
        kind,
        m_count,
        quadrature_k: grid.quadrature_k,
    };

    let mut gamma_all = vec![0.0f64; nt * m_count * nx];
    let mut pi_all = vec![0.0f64; nt * m_count * nx];
    let mut value_all = vec![0.0f64; nt * m_count * nx];
    let mut zero_all = vec![0.0f64; nt * m_count];
    let mut value_next = vec![0.0f64; m_count * nx];
    let mut w0_next = vec![0.0f64; m_count];

    for i in (0..nt).rev() {
        let s = table.one_period_survival_at(i);
        let util = Util::build(prefs, i);

        if s <= 0.0 {
            for m in 1..=m_count {
                for j in 0..nx {
                    let x = xs[j];
                    let g = x / dt;
                    let v = combine(prefs, util.at(g), dt, 0.0, 0.0);
                    let idx = geom.idx(i, m, j);
                    gamma_all[idx] = g;
                    pi_all[idx] = pi_grid[0];
                    value_all[idx] = v;
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
                let xdt = x / dt;
                let mut probe = ClampCount::default();
                let mut best: Option<(f64, f64, usize)> = None;
                for (p_idx, _) in pi_grid.iter().enumerate() {
                    let quad = &quads[p_idx];
                    let mut objective = |g: f64| {
                        let cont =
                            direct_continuation(&next, quad, mixing, x - g * dt, &mut probe);
                        combine(prefs, util.at(g), dt, s, cont)
                    };
                    // Dense scan, then nested zoom around the best point.
                    let mut lo = 0.0f64;
                    let mut hi = xdt;
                    let mut local: Option<(f64, f64)> = None;
                    for round in 0..=ZOOM_ROUNDS {
                        let n = if round == 0 { DENSE_SCAN } else { ZOOM_SCAN };
                        let stepw = (hi - lo) / (n - 1) as f64;
                        for k in 0..n {
                            let g = (lo + stepw * k as f64).clamp(0.0, xdt);
                            let v = objective(g);
                            // Strictly-better keeps the smallest γ on ties.
                            if local.map_or(true, |(bv, bg)| v > bv || (v == bv && g < bg))
                            {
                                local = Some((v, g));
                            }
                        }
                        let (_, bg) = local.unwrap();
                        let w = (hi - lo) / (n - 1) as f64;
                        lo = (bg - w).max(0.0);
                        hi = (bg + w).min(xdt);
                    }
                    let (bv, bg) = local.unwrap();
                    best = super::engine::better(best, (bv, bg, p_idx));
                }
                let (_, g, p_idx) = best.expect("π grid is non-empty");
                let mut clamps = ClampCount::default();
                let cont =
                    direct_continuation(&next, &quads[p_idx], mixing, x - g * dt, &mut clamps);
                let v = combine(prefs, util.at(g), dt, s, cont);
                let idx = geom.idx(i, m, j);
                gamma_all[idx] = g;
                pi_all[idx] = pi_grid[p_idx];
                value_all[idx] = v;
            }
        }
        for m in 1..=m_count {
            let from = geom.idx(i, m, 0);
            value_next[(m - 1) * nx..m * nx].copy_from_slice(&value_all[from..from + nx]);
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

    Ok(Solution {
        policy: PolicyTable {
            geom: geom.clone(),
            gamma: gamma_all,
            pi: pi_all,
        },
        value: ValueFunction {
            geom,
            value: value_all,
            value_zero: zero_all,
        },
        diagnostics: Diagnostics::default(),
    })
}
