//! Discrete mortality distributions on an evenly spaced time grid.
//!
//! A [`MortalityTable`] stores the probability mass `p[i]` of dying in
//! `[t_i, t_i + dt)` for grid times `t_i = i·dt` measured in years since
//! retirement. Tables are always truncated: survival beyond the last grid
//! point is zero, and any mass removed by truncation is lumped into the last
//! retained point so that gains remain proper expectations.

use std::path::Path;
use thiserror::Error;

/// Relative tolerance for checking that a grid is evenly spaced.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MortalityError {
    #[error("failed to read mortality file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mortality file {path}, line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("mortality table invalid: {0}")]
    Validation(String),
    #[error("time {t} outside table domain [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },
}

/// Death-time probability mass on an even grid, with survival queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityTable {
    /// Years per step.
    dt: f64,
    /// Grid times 0, δt, …, T−δt (years since retirement).
    t_grid: Vec<f64>,
    /// Probability of death in `[t_i, t_i + dt)`; sums to 1.
    p: Vec<f64>,
    /// Survival `S(t_i) = Σ_{j ≥ i} p_j`, precomputed; `survival[0] = 1`.
    survival: Vec<f64>,
}

impl MortalityTable {
    /// Builds a table from raw `(t, p)` rows, validating and renormalizing.
    pub fn new(t_grid: Vec<f64>, p: Vec<f64>) -> Result<Self, MortalityError> {
        if t_grid.len() != p.len() {
            return Err(MortalityError::Validation(format!(
                "t grid has {} entries but p has {}",
                t_grid.len(),
                p.len()
            )));
        }
        if t_grid.is_empty() {
            return Err(MortalityError::Validation("empty table".into()));
        }
        if !t_grid[0].is_finite() || t_grid[0].abs() > GRID_TOL {
            return Err(MortalityError::Validation(format!(
                "grid must start at t = 0, got {}",
                t_grid[0]
            )));
        }
        let dt = if t_grid.len() == 1 {
            1.0
        } else {
            t_grid[1] - t_grid[0]
        };
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(MortalityError::Validation(format!(
                "grid spacing must be positive, got {dt}"
            )));
        }
        for w in t_grid.windows(2) {
            let step = w[1] - w[0];
            if (step - dt).abs() > GRID_TOL * dt.max(1.0) {
                return Err(MortalityError::Validation(format!(
                    "uneven grid spacing at t = {}: step {} vs {}",
                    w[1], step, dt
                )));
            }
        }
        let mut mass = 0.0;
        for (i, &q) in p.iter().enumerate() {
            if !q.is_finite() || q < 0.0 {
                return Err(MortalityError::Validation(format!(
                    "negative or non-finite mass {} at t = {}",
                    q, t_grid[i]
                )));
            }
            mass += q;
        }
        if mass <= 0.0 {
            return Err(MortalityError::Validation("total mass is zero".into()));
        }
        let p: Vec<f64> = p.iter().map(|q| q / mass).collect();
        let mut survival = vec![0.0; p.len()];
        let mut acc = 0.0;
        for i in (0..p.len()).rev() {
            acc += p[i];
            survival[i] = acc;
        }
        // Pin S(0) to exactly 1 (it is 1 up to rounding after renormalization).
        survival[0] = 1.0;
        Ok(Self {
            dt,
            t_grid,
            p,
            survival,
        })
    }

    /// Years per step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Grid times `0, δt, …, T−δt`.
    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    /// Death mass per grid point.
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.p.len()
    }

    /// True when the table has no grid points (never constructible).
    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// End of the support, `T = t_last + δt`; survival beyond it is zero.
    pub fn horizon(&self) -> f64 {
        self.t_grid[self.t_grid.len() - 1] + self.dt
    }

    /// Expected death time `E[τ] = Σ t_i·p_i` in years.
    pub fn expected_death_time(&self) -> f64 {
        self.t_grid
            .iter()
            .zip(&self.p)
            .map(|(t, q)| t * q)
            .sum()
    }

    /// Survival probability `S(t) = P(τ ≥ t)` for `0 ≤ t ≤ T`.
    ///
    /// Death times live on the grid, so `S` is a right-continuous step
    /// function dropping at each grid point; `S(0) = 1`, `S(T) = 0`.
    pub fn survival(&self, t: f64) -> Result<f64, MortalityError> {
        let horizon = self.horizon();
        if !(0.0..=horizon * (1.0 + GRID_TOL)).contains(&t) {
            return Err(MortalityError::Domain { t, horizon });
        }
        // First grid index with t_i >= t (deaths at t_i count as still alive at t_i).
        let idx = (t / self.dt - GRID_TOL).ceil().max(0.0) as usize;
        Ok(if idx >= self.p.len() {
            0.0
        } else {
            self.survival[idx]
        })
    }

    /// Survival at grid index `i` (`S(t_i)`); 0 past the end.
    pub fn survival_at(&self, i: usize) -> f64 {
        if i >= self.survival.len() {
            0.0
        } else {
            self.survival[i]
        }
    }

    /// One-period survival `s_t = S(t+δt)/S(t)` at a grid time, with `0/0 = 0`.
    pub fn one_period_survival(&self, t: f64) -> f64 {
        let idx = (t / self.dt).round() as usize;
        self.one_period_survival_at(idx)
    }

    /// One-period survival by grid index.
    pub fn one_period_survival_at(&self, i: usize) -> f64 {
        let s_t = self.survival_at(i);
        if s_t <= 0.0 {
            return 0.0;
        }
        self.survival_at(i + 1) / s_t
    }

    /// Drops grid points with survival below `eps`, lumping the removed mass
    /// into the last retained point.
    pub fn truncate_tail(&self, eps: f64) -> Result<MortalityTable, MortalityError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(MortalityError::Validation(format!(
                "truncation threshold must lie in (0, 1), got {eps}"
            )));
        }
        // Retain all points with S(t) >= eps; S(0) = 1 so at least one stays.
        let mut last = 0;
        for i in 0..self.len() {
            if self.survival[i] >= eps {
                last = i;
            }
        }
        let mut p: Vec<f64> = self.p[..=last].to_vec();
        let removed: f64 = self.p[last + 1..].iter().sum();
        p[last] += removed;
        MortalityTable::new(self.t_grid[..=last].to_vec(), p)
    }
}

/// Loads a `t,p` CSV (header required, `#` comment lines allowed).
pub fn load_mortality_csv<P: AsRef<Path>>(path: P) -> Result<MortalityTable, MortalityError> {
    let path_str = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(&path).map_err(|source| MortalityError::Io {
        path: path_str.clone(),
        source,
    })?;
    parse_mortality_csv(&text, &path_str)
}

/// Parses CSV text in the `load_mortality_csv` format.
pub fn parse_mortality_csv(text: &str, origin: &str) -> Result<MortalityTable, MortalityError> {
    let mut t_grid = Vec::new();
    let mut p = Vec::new();
    let mut saw_header = false;
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            let lowered = line.to_ascii_lowercase().replace(' ', "");
            if lowered != "t,p" {
                return Err(MortalityError::Parse {
                    path: origin.into(),
                    line: line_no + 1,
                    message: format!("expected header `t,p`, found `{line}`"),
                });
            }
            saw_header = true;
            continue;
        }
        let mut fields = line.split(',');
        let (t_str, p_str) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(MortalityError::Parse {
                    path: origin.into(),
                    line: line_no + 1,
                    message: format!("expected two comma-separated fields, found `{line}`"),
                })
            }
        };
        let parse = |s: &str, what: &str| -> Result<f64, MortalityError> {
            s.parse::<f64>().map_err(|_| MortalityError::Parse {
                path: origin.into(),
                line: line_no + 1,
                message: format!("cannot parse {what} `{s}` as a number"),
            })
        };
        let t = parse(t_str, "time")?;
        let q = parse(p_str, "probability")?;
        if let Some(&prev) = t_grid.last() {
            if t <= prev {
                return Err(MortalityError::Parse {
                    path: origin.into(),
                    line: line_no + 1,
                    message: format!("times must be strictly increasing ({t} after {prev})"),
                });
            }
        }
        t_grid.push(t);
        p.push(q);
    }
    if !saw_header {
        return Err(MortalityError::Parse {
            path: origin.into(),
            line: 1,
            message: "missing `t,p` header".into(),
        });
    }
    MortalityTable::new(t_grid, p)
}

/// The bundled age-65 female cohort table (yearly grid, tail cut at
/// survival 1e−5 with the removed mass lumped into the last point).
pub fn bundled_table() -> MortalityTable {
    parse_mortality_csv(
        include_str!("../data/cmi2018f_15.csv"),
        "bundled cmi2018f_15.csv",
    )
    .expect("bundled mortality table must parse")
}

/// Synthetic table from the Gompertz–Makeham hazard `h(t) = A + B·c^t`.
///
/// The survival function is `S(t) = exp(−(A·t + B·(c^t − 1)/ln c))` (with the
/// `c = 1` limit `exp(−(A+B)·t)`); the grid runs `0, dt, …` up to `horizon`,
/// and the residual mass `S(horizon)` is lumped into the last grid point.
pub fn gompertz_makeham_table(
    a: f64,
    b: f64,
    c: f64,
    dt: f64,
    horizon: f64,
) -> Result<MortalityTable, MortalityError> {
    if a < 0.0 || b < 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(MortalityError::Validation(format!(
            "hazard coefficients must be non-negative, got A={a}, B={b}"
        )));
    }
    if a == 0.0 && b == 0.0 {
        return Err(MortalityError::Validation(
            "hazard is identically zero (A = B = 0)".into(),
        ));
    }
    if !(c >= 1.0) || !c.is_finite() {
        return Err(MortalityError::Validation(format!(
            "hazard growth must satisfy c ≥ 1, got {c}"
        )));
    }
    if !(dt > 0.0) || !(horizon >= dt) {
        return Err(MortalityError::Validation(format!(
            "need dt > 0 and horizon ≥ dt, got dt={dt}, horizon={horizon}"
        )));
    }
    let integrated = |t: f64| -> f64 {
        if c == 1.0 {
            (a + b) * t
        } else {
            a * t + b * (c.powf(t) - 1.0) / c.ln()
        }
    };
    let n = (horizon / dt + GRID_TOL).floor() as usize;
    let n = n.max(1);
    let mut t_grid = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        t_grid.push(t);
        let s_lo = (-integrated(t)).exp();
        let s_hi = (-integrated(t + dt)).exp();
        p.push(s_lo - s_hi);
    }
    // Residual mass beyond the horizon goes to the last point.
    let last = p.len() - 1;
    p[last] += (-integrated(n as f64 * dt)).exp();
    MortalityTable::new(t_grid, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simple() -> MortalityTable {
        MortalityTable::new(vec![0.0, 1.0], vec![0.4, 0.6]).unwrap()
    }

    #[test]
    fn direct_construction_and_survival() {
        let t = simple();
        assert_eq!(t.dt(), 1.0);
        assert_eq!(t.survival(0.0).unwrap(), 1.0);
        assert_relative_eq!(t.survival(1.0).unwrap(), 0.6);
        assert_eq!(t.survival(2.0).unwrap(), 0.0);
        assert!(t.survival(2.5).is_err());
        assert!(t.survival(-0.1).is_err());
    }

    #[test]
    fn renormalizes_mass() {
        let t = MortalityTable::new(vec![0.0, 1.0, 2.0], vec![0.2, 0.2, 0.2]).unwrap();
        for q in t.p() {
            assert_relative_eq!(*q, 1.0 / 3.0, max_relative = 1e-12);
        }
        let total: f64 = t.p().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_period_survival_examples() {
        let t = simple();
        assert_relative_eq!(t.one_period_survival(0.0), 0.6);
        assert_eq!(t.one_period_survival(1.0), 0.0, "last grid point");
    }

    #[test]
    fn one_period_survival_zero_over_zero() {
        // A zero-mass tail point makes S(t) = 0 before the end.
        let t = MortalityTable::new(vec![0.0, 1.0, 2.0], vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(t.one_period_survival(2.0), 0.0);
    }

    #[test]
    fn constant_hazard_table() {
        let t = gompertz_makeham_table(std::f64::consts::LN_2, 0.0, 1.0, 1.0, 40.0).unwrap();
        assert_relative_eq!(t.survival(1.0).unwrap(), 0.5, max_relative = 1e-12);
        // Memoryless hazard: interior one-period survival is exactly 1/2.
        for i in 0..t.len() - 1 {
            assert_relative_eq!(t.one_period_survival_at(i), 0.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn gompertz_truncation_example() {
        let t = gompertz_makeham_table(std::f64::consts::LN_2, 0.0, 1.0, 1.0, 3.0).unwrap();
        assert_eq!(t.len(), 3);
        assert_relative_eq!(t.p()[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(t.p()[1], 0.25, max_relative = 1e-12);
        assert_relative_eq!(t.p()[2], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn gompertz_increasing_hazard_monotone() {
        let t = gompertz_makeham_table(0.0, 0.01, 1.1, 1.0, 30.0).unwrap();
        for i in 1..t.len() - 1 {
            assert!(
                t.one_period_survival_at(i) < t.one_period_survival_at(i - 1),
                "s_t must strictly decrease under strictly increasing hazard"
            );
        }
    }

    #[test]
    fn gompertz_rejects_zero_hazard() {
        assert!(gompertz_makeham_table(0.0, 0.0, 1.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn truncate_tail_example() {
        let t = MortalityTable::new(vec![0.0, 1.0, 2.0], vec![0.4, 0.3, 0.3]).unwrap();
        let cut = t.truncate_tail(0.5).unwrap();
        assert_eq!(cut.len(), 2);
        assert_relative_eq!(cut.p()[0], 0.4, max_relative = 1e-12);
        assert_relative_eq!(cut.p()[1], 0.6, max_relative = 1e-12);
    }

    #[test]
    fn truncate_tail_noop_when_below_min_survival() {
        let t = simple();
        let cut = t.truncate_tail(1e-9).unwrap();
        assert_eq!(cut, t);
    }

    #[test]
    fn truncate_preserves_mass_and_horizon() {
        let t = gompertz_makeham_table(0.001, 0.005, 1.09, 1.0, 80.0).unwrap();
        let cut = t.truncate_tail(1e-5).unwrap();
        assert!((cut.p().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(cut.horizon() <= t.horizon());
    }

    #[test]
    fn survival_minus_next_is_mass() {
        let t = gompertz_makeham_table(0.0005, 0.007, 1.1, 1.0, 60.0).unwrap();
        for i in 0..t.len() {
            let s_t = t.survival_at(i);
            let s_next = t.survival_at(i + 1);
            assert_relative_eq!(s_t - s_next, t.p()[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn survival_product_identity() {
        let t = gompertz_makeham_table(0.0005, 0.007, 1.1, 1.0, 60.0).unwrap();
        let mut prod = 1.0;
        for i in 0..t.len() {
            assert!((prod - t.survival_at(i)).abs() < 1e-10);
            let s = t.one_period_survival_at(i);
            assert!((0.0..=1.0).contains(&s));
            prod *= s;
        }
    }

    #[test]
    fn bundled_table_sanity() {
        let t = bundled_table();
        assert_eq!(t.survival(0.0).unwrap(), 1.0);
        let mean = t.expected_death_time();
        assert!(
            (20.0..=30.0).contains(&mean),
            "bundled mean death time {mean} outside [20, 30]"
        );
        // Snapshot of the shipped bundle so accidental edits are caught.
        assert_relative_eq!(mean, 22.8009, max_relative = 1e-4);
        assert_eq!(t.dt(), 1.0);
        assert_eq!(t.len(), 53);
    }

    #[test]
    fn csv_parse_errors_name_line() {
        let bad = "t,p\n0.0,0.5\n1.0,oops\n";
        let err = parse_mortality_csv(bad, "test.csv").unwrap_err();
        match err {
            MortalityError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let neg = "t,p\n0.0,0.5\n1.0,-0.1\n";
        assert!(matches!(
            parse_mortality_csv(neg, "test.csv").unwrap_err(),
            MortalityError::Validation(_)
        ));
        let uneven = "t,p\n0.0,0.2\n1.0,0.2\n3.0,0.6\n";
        assert!(matches!(
            parse_mortality_csv(uneven, "test.csv").unwrap_err(),
            MortalityError::Validation(_)
        ));
    }

    #[test]
    fn csv_roundtrip_example() {
        let t = parse_mortality_csv("t,p\n0,0.4\n1,0.6\n", "inline").unwrap();
        assert_relative_eq!(t.survival(1.0).unwrap(), 0.6);
    }
}
