//! Backward-induction solver for the exponential and additive Bellman
//! recursions over all fund kinds.

use super::golden::maximize_1d_with_extras;
use super::transition::{
    accumulate_scaled, binomial_pmf, boundary_kinks, direct_continuation, ClampCount, Mixing,
    NextStep, Tail,
};
use super::{
    combine, validate_prefs_grid, Diagnostics, DpError, FundKind, GridConfig, PolicyTable,
    Solution, Spacing, TableGeometry, ValueFunction, OBJ_REL_TOL, VALUE_FLOOR,
};
use crate::interp::MonotoneCubic;
use crate::market::{return_nodes, MarketParams, ReturnQuadrature};
use crate::mortality::MortalityTable;
use crate::prefs::PreferenceSpec;
use rayon::prelude::*;

/// Finite collectives larger than this use the tabulated continuation path;
/// smaller instances (and the single-slice kinds) evaluate the mixture
/// directly inside the consumption search. Direct evaluation keeps the
/// optimizer on the exact continuation arithmetic (the tabulation re-fit
/// costs ~1e−6 relative in the chosen decision) and is also cheaper until
/// the survivor dimension grows: the binomial mixture is at most
/// `limit` branches wide, while tabulation builds `n_π·m` cubic re-fits
/// per step regardless of how many are consulted.
const DIRECT_MIXTURE_LIMIT: usize = 8;

/// Period-utility evaluator specialized per time step; reproduces the
/// preference types' arithmetic exactly.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Util {
    Km { a: f64, rho: f64, sp: f64, base: f64 },
    Vnm { rho: f64 },
}

impl Util {
    pub fn build(prefs: &PreferenceSpec, i: usize) -> Util {
        match prefs {
            PreferenceSpec::Km(p) => {
                let sp = p.schedules.sp(i);
                let adequate_total = p.schedules.al(i) + sp;
                Util::Km {
                    a: p.a,
                    rho: p.rho,
                    sp,
                    base: p.a * adequate_total.powf(p.rho),
                }
            }
            PreferenceSpec::Vnm(p) => Util::Vnm { rho: p.rho },
        }
    }

    #[inline]
    pub fn at(&self, gamma: f64) -> f64 {
        match *self {
            Util::Km { a, rho, sp, base } => {
                if gamma < 0.0 || gamma.is_nan() {
                    return f64::NEG_INFINITY;
                }
                a * (gamma + sp).powf(rho) - base
            }
            Util::Vnm { rho } => {
                if gamma < 0.0 || gamma.is_nan() {
                    return f64::NEG_INFINITY;
                }
                if gamma == 0.0 {
                    return if rho > 0.0 { 0.0 } else { f64::NEG_INFINITY };
                }
                rho.signum() * gamma.powf(rho)
            }
        }
    }
}

/// Continuation value tabulated on the wealth grid for one `(π, m)` pair,
/// extended below the lowest node by the preference family's tail (the
/// anchor for the bridge case is the exact zero-wealth mixture).
struct TabulatedCont {
    interp: MonotoneCubic,
    at_zero: f64,
    x_min: f64,
    log_space: bool,
    tail: Tail,
}

impl TabulatedCont {
    #[inline]
    fn eval(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return self.at_zero;
        }
        if y < self.x_min {
            let v0 = self.interp.values()[0];
            return self.tail.below(y, self.x_min, v0, self.at_zero);
        }
        self.interp.eval(if self.log_space { y.ln() } else { y })
    }
}

struct StateDecision {
    gamma: f64,
    pi_idx: usize,
    value: f64,
    clamps: ClampCount,
}

/// Picks the better of two candidate decisions under the ordering value
/// first, then smaller consumption, then smaller risky fraction.
pub(crate) fn better(
    best: Option<(f64, f64, usize)>,
    cand: (f64, f64, usize),
) -> Option<(f64, f64, usize)> {
    match best {
        None => Some(cand),
        Some(b) => {
            let scale = b.0.abs().max(cand.0.abs()).max(1e-300);
            let diff = cand.0 - b.0;
            if diff > OBJ_REL_TOL * scale {
                Some(cand)
            } else if diff >= -OBJ_REL_TOL * scale {
                // Tie at tolerance: lexicographic (γ, π), keeping the larger
                // recorded objective.
                let value = b.0.max(cand.0);
                if (cand.1, cand.2) < (b.1, b.2) {
                    Some((value, cand.1, cand.2))
                } else {
                    Some((value, b.1, b.2))
                }
            } else {
                Some(b)
            }
        }
    }
}

/// Solves the lifetime consumption–investment problem by backward induction
/// on the wealth grid and returns the optimal policy, the value function and
/// solver diagnostics.
///
/// Preferences select the recursion: exponential (KM) preferences maximize
/// `E[−exp(−Σ u·δt)]`, additive (vNM) preferences maximize `E[Σ u·δt]`. The
/// consumption search runs a coarse scan plus golden-section refinement to a
/// relative objective tolerance of [`OBJ_REL_TOL`]; the risky fraction is
/// chosen on the configured grid. Ties prefer smaller consumption, then a
/// smaller risky fraction. In the final period (no survival) all wealth is
/// consumed.
pub fn solve_km(
    prefs: &PreferenceSpec,
    market: &MarketParams,
    table: &MortalityTable,
    kind: FundKind,
    grid: &GridConfig,
) -> Result<Solution, DpError> {
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
    let tail = Tail::for_prefs(prefs);

    let mut diagnostics = Diagnostics::default();
    if nx < 64 {
        let w = format!(
            "coarse wealth grid ({nx} nodes); values and policies may be inaccurate"
        );
        log::warn!("{w}");
        diagnostics.warnings.push(w);
    }

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

    // Rolling next-step values: `value_next[(m−1)·nx + j]`, `w0_next[m−1]`.
    let mut value_next = vec![0.0f64; m_count * nx];
    let mut w0_next = vec![0.0f64; m_count];

    let direct_mixture = m_count <= DIRECT_MIXTURE_LIMIT;

    for i in (0..nt).rev() {
        let s = table.one_period_survival_at(i);
        let util = Util::build(prefs, i);
        let t_i = t_grid[i];

        if s <= 0.0 {
            // No survival past this step: consume everything; the risky
            // fraction is irrelevant and ties break to the grid minimum.
            for m in 1..=m_count {
                for j in 0..nx {
                    let x = xs[j];
                    let g = x / dt;
                    let v = combine(prefs, util.at(g), dt, 0.0, 0.0);
                    if v.is_nan() {
                        return Err(DpError::NonFinite {
                            t: t_i,
                            x,
                            detail: "terminal value is NaN".into(),
                        });
                    }
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
            tail,
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

        // Tabulated continuation per (π, m) for large finite collectives.
        let tab: Option<Vec<Vec<TabulatedCont>>> = if direct_mixture {
            None
        } else {
            let built: Vec<Vec<TabulatedCont>> = (0..pi_grid.len())
                .into_par_iter()
                .map(|p_idx| {
                    let quad = &quads[p_idx];
                    let mut clamps = ClampCount::default();
                    let mut scratch = vec![0.0f64; nx];
                    // Stage 1: return-mixed values per future survivor count.
                    let mut n_rows = vec![0.0f64; m_count * nx];
                    for mp in 0..m_count {
                        let row = &mut n_rows[mp * nx..(mp + 1) * nx];
                        for (&r, &w) in quad.nodes.iter().zip(&quad.weights) {
                            accumulate_scaled(
                                next.interpolant(mp),
                                next.zero_value(mp),
                                log_space,
                                &xs,
                                x_min,
                                x_max,
                                tail,
                                r,
                                w,
                                &mut scratch,
                                row,
                                &mut clamps,
                            );
                        }
                    }
                    let n_interps: Vec<MonotoneCubic> = (0..m_count)
                        .map(|mp| {
                            MonotoneCubic::new(
                                coords.clone(),
                                n_rows[mp * nx..(mp + 1) * nx].to_vec(),
                            )
                            .expect("grid coordinates are strictly increasing")
                        })
                        .collect();
                    // Stage 2: binomial mixture over survivor counts.
                    let conts: Vec<TabulatedCont> = (1..=m_count)
                        .map(|m| {
                            let (b0, probs) = match &mixings[m - 1] {
                                Mixing::Finite { b0, probs, .. } => (*b0, probs),
                                _ => unreachable!("tabulated path is finite-only"),
                            };
                            let mut row = vec![0.0f64; nx];
                            let mut at_zero = 0.0;
                            for (off, &q) in probs.iter().enumerate() {
                                let mprime = b0 + off + 1;
                                let factor = m as f64 / mprime as f64;
                                accumulate_scaled(
                                    &n_interps[mprime - 1],
                                    next.zero_value(mprime - 1),
                                    log_space,
                                    &xs,
                                    x_min,
                                    x_max,
                                    tail,
                                    factor,
                                    q,
                                    &mut scratch,
                                    &mut row,
                                    &mut clamps,
                                );
                                at_zero += q * next.zero_value(mprime - 1);
                            }
                            for v in row.iter_mut() {
                                *v = v.max(VALUE_FLOOR);
                            }
                            TabulatedCont {
                                interp: MonotoneCubic::new(coords.clone(), row)
                                    .expect("grid coordinates are strictly increasing"),
                                at_zero: at_zero.max(VALUE_FLOOR),
                                x_min,
                                log_space,
                                tail,
                            }
                        })
                        .collect();
                    let _ = clamps; // tabulation clamps are optimizer-side only
                    conts
                })
                .collect();
            Some(built)
        };

        // Solve every state of this step.
        let decisions: Result<Vec<StateDecision>, DpError> = (0..m_count * nx)
            .into_par_iter()
            .map(|state| {
                let m = state / nx + 1;
                let j = state % nx;
                let x = xs[j];
                let xdt = x / dt;
                let mixing = &mixings[m - 1];
                let mut probe = ClampCount::default();

                let mut best: Option<(f64, f64, usize)> = None;
                if let Some(tab) = &tab {
                    // Coarse scan per π, then golden refinement at the two
                    // most promising grid fractions. The tabulated
                    // continuation has a single kink where post-consumption
                    // wealth crosses the grid bottom; scan it explicitly.
                    let kink = (x - x_min) / dt;
                    let extras = [kink];
                    let mut top: [(f64, usize); 2] =
                        [(f64::NEG_INFINITY, 0), (f64::NEG_INFINITY, 0)];
                    let n_scan = grid.n_consumption.max(3);
                    for (p_idx, _) in pi_grid.iter().enumerate() {
                        let cont = &tab[p_idx][m - 1];
                        let mut scan_best = f64::NEG_INFINITY;
                        for k in 0..=n_scan {
                            let g = if k == n_scan {
                                if kink <= 0.0 || kink >= xdt {
                                    continue;
                                }
                                kink
                            } else {
                                xdt * k as f64 / (n_scan - 1) as f64
                            };
                            let v =
                                combine(prefs, util.at(g), dt, s, cont.eval(x - g * dt));
                            if v > scan_best {
                                scan_best = v;
                            }
                        }
                        if scan_best > top[0].0 {
                            top[1] = top[0];
                            top[0] = (scan_best, p_idx);
                        } else if scan_best > top[1].0 {
                            top[1] = (scan_best, p_idx);
                        }
                    }
                    for &(score, p_idx) in top.iter() {
                        if score == f64::NEG_INFINITY {
                            continue;
                        }
                        let cont = &tab[p_idx][m - 1];
                        let mx = maximize_1d_with_extras(0.0, xdt, n_scan, &extras, OBJ_REL_TOL, |g| {
                            combine(prefs, util.at(g), dt, s, cont.eval(x - g * dt))
                        });
                        best = better(best, (mx.value, mx.arg, p_idx));
                    }
                } else {
                    let mut extras = Vec::new();
                    for (p_idx, _) in pi_grid.iter().enumerate() {
                        let quad = &quads[p_idx];
                        boundary_kinks(mixing, quad, x, dt, x_min, x_max, &mut extras);
                        let mx = maximize_1d_with_extras(
                            0.0,
                            xdt,
                            grid.n_consumption,
                            &extras,
                            OBJ_REL_TOL,
                            |g| {
                                let cont = direct_continuation(
                                    &next,
                                    quad,
                                    mixing,
                                    x - g * dt,
                                    &mut probe,
                                );
                                combine(prefs, util.at(g), dt, s, cont)
                            },
                        );
                        best = better(best, (mx.value, mx.arg, p_idx));
                    }
                }

                let (_, gamma, pi_idx) =
                    best.expect("at least one risky-fraction grid point");
                let gamma = gamma.clamp(0.0, xdt);
                // Definitive stored value: direct evaluation at the chosen
                // decision — the same arithmetic the policy evaluator uses.
                let mut clamps = ClampCount::default();
                let cont = direct_continuation(
                    &next,
                    &quads[pi_idx],
                    mixing,
                    x - gamma * dt,
                    &mut clamps,
                );
                let value = combine(prefs, util.at(gamma), dt, s, cont);
                if value.is_nan() {
                    return Err(DpError::NonFinite {
                        t: t_i,
                        x,
                        detail: "Bellman value is NaN".into(),
                    });
                }
                Ok(StateDecision {
                    gamma,
                    pi_idx,
                    value,
                    clamps,
                })
            })
            .collect();
        let decisions = decisions?;

        for (state, d) in decisions.into_iter().enumerate() {
            let m = state / nx + 1;
            let j = state % nx;
            let idx = geom.idx(i, m, j);
            gamma_all[idx] = d.gamma;
            pi_all[idx] = pi_grid[d.pi_idx];
            value_all[idx] = d.value;
            value_next[(m - 1) * nx + j] = d.value;
            diagnostics.clamped_below += d.clamps.below;
            diagnostics.clamped_above += d.clamps.above;
        }

        // Zero-wealth chain: forced γ = 0, next wealth stays 0.
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

    if diagnostics.clamped_above > 0 {
        let w = format!(
            "{} continuation lookups above the wealth grid were clamped to the top node",
            diagnostics.clamped_above
        );
        log::warn!("{w}");
        diagnostics.warnings.push(w);
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
        diagnostics,
    })
}
