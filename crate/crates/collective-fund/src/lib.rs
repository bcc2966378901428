//! Collective post-retirement investment toolkit.
//!
//! Computes optimal consumption/investment policies for individual (`n = 1`),
//! finite-collective (`n ≤ 50`) and infinite-collective pension funds under
//! mortality-aware preferences (exponential Kihlstrom–Mirman, additive vNM
//! power, homogeneous Epstein–Zin), simulates the heterogeneous-fund sharing
//! algorithm, and benchmarks everything against fairly priced annuities.
//!
//! Module map:
//! - [`mortality`] — discrete death-time tables: loading, truncation, queries.
//! - [`market`] — real-terms Black–Scholes–Merton step returns and quadrature.
//! - [`prefs`] — preference families, calibration, funding costs.
//! - [`dp`] — backward-induction solvers, policy evaluation, testing oracle.
//! - [`pool`] — heterogeneous fund ledger and the sharing-algorithm Monte Carlo.
//! - [`eval`] — annuity pricing/inversion, Monte Carlo gains, fan statistics.
//! - [`cli`] — configuration and experiment orchestration for the binary.

pub mod cli;
pub mod dp;
pub mod interp;
pub mod eval;
pub mod market;
pub mod mortality;
pub mod pool;
pub mod prefs;
