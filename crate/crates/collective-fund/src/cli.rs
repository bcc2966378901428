//! Configuration loading and experiment orchestration for the binary:
//! `solve`, `compare`, `fan`, `hetero`, and `evaluate` runs emitting CSV.
//!
//! Configs are flat `key = value` text (one pair per line, `#` comments,
//! unknown keys rejected). All rates are real (net of inflation). Every run
//! writes a `resolved_config.txt` that reproduces it bit-identically, and
//! every CSV carries the resolving seed in a leading comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dp::{
    solve_ez_homogeneous, solve_km, FundKind, GridConfig, Solution, Spacing,
};
use crate::eval::{
    annuity_equivalent, annuity_gain, annuity_outperformance, annuity_payout, fan_statistics,
    mc_gain, simulate_consumption_paths,
};
use crate::market::MarketParams;
use crate::mortality::{bundled_table, load_mortality_csv, MortalityTable};
use crate::pool::{
    generate_population, or_histogram, reference_table, run_hetero_mc, PopulationSpec,
};
use crate::prefs::{
    adequacy_budget, EZPreferences, FundingMode, KMPreferences, PreferenceSpec, Schedules,
    VNMPreferences,
};

/// Orchestration error carrying the process exit code: 2 configuration,
/// 3 solver/numerics, 4 I/O.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn solver<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Solver(e.to_string())
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

/// Preference family driving a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceFamily {
    Km,
    Vnm,
    Ez,
}

/// Strategy selector: the three fund kinds plus the annuity benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundSelector {
    Annuity,
    Individual,
    CollectiveInfinite,
    CollectiveFinite,
}

/// Initial budget: `auto` prices the adequacy schedule, a number is taken
/// as-is; either is then multiplied by `x0_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum X0Spec {
    Auto,
    Value(f64),
}

/// Mortality input: the bundled table or a CSV path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MortalitySource {
    Bundled,
    Path(String),
}

/// One run's full parameter set. Field defaults reproduce the benchmark
/// scenario (state pension £6,718 growing at 2.7% real, adequate income
/// £16,800, real rate 2.7%, equity premium 3.5% at 15% volatility, λ = 1,
/// ρ = −1) on the bundled mortality table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preference: PreferenceFamily,
    pub rho: f64,
    pub lambda: f64,
    pub ez_alpha: f64,
    pub ez_rho: f64,
    pub ez_beta: f64,
    pub sp0: f64,
    pub r_tl: f64,
    pub total_adequacy: f64,
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub x0: X0Spec,
    pub x0_scale: f64,
    pub fund: FundSelector,
    pub fund_n: usize,
    pub mortality_file: MortalitySource,
    pub funding_mode: FundingMode,
    pub n_wealth: usize,
    pub n_consumption: usize,
    pub n_pi: usize,
    pub quadrature_k: usize,
    pub pi_min: f64,
    pub pi_max: f64,
    pub wealth_min: X0Spec,
    pub wealth_max: X0Spec,
    pub seed: u64,
    pub n_paths: usize,
    pub n_sims: usize,
    pub pop_n: usize,
    pub pop_power_min: f64,
    pub pop_power_max: f64,
    pub pop_wealth_min: f64,
    pub pop_wealth_max: f64,
    pub pop_age_min: u32,
    pub pop_age_max: u32,
    pub pop_sex_split: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preference: PreferenceFamily::Km,
            rho: -1.0,
            lambda: 1.0,
            ez_alpha: -2.0,
            ez_rho: -1.0,
            ez_beta: 1.0,
            sp0: 6718.0,
            r_tl: 0.027,
            total_adequacy: 16800.0,
            r: 0.027,
            mu: 0.062,
            sigma: 0.15,
            x0: X0Spec::Auto,
            x0_scale: 1.0,
            fund: FundSelector::CollectiveInfinite,
            fund_n: 50,
            mortality_file: MortalitySource::Bundled,
            funding_mode: FundingMode::FairLife,
            n_wealth: 400,
            n_consumption: 16,
            n_pi: 33,
            quadrature_k: 9,
            pi_min: 0.0,
            pi_max: 1.0,
            wealth_min: X0Spec::Auto,
            wealth_max: X0Spec::Auto,
            seed: 2024,
            n_paths: 10_000,
            n_sims: 10_000,
            pop_n: 100,
            pop_power_min: -1.5,
            pop_power_max: -0.5,
            pop_wealth_min: 0.5,
            pop_wealth_max: 1.5,
            pop_age_min: 60,
            pop_age_max: 69,
            pop_sex_split: 0.5,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, CliError> {
    value
        .parse::<f64>()
        .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse `{value}` as a number")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, CliError> {
    value.parse::<usize>().map_err(|_| {
        CliError::Config(format!("key `{key}`: cannot parse `{value}` as a non-negative integer"))
    })
}

fn parse_auto_f64(key: &str, value: &str) -> Result<X0Spec, CliError> {
    if value == "auto" {
        Ok(X0Spec::Auto)
    } else {
        Ok(X0Spec::Value(parse_f64(key, value)?))
    }
}

impl RunConfig {
    /// Applies one `key = value` pair; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "preference" => {
                self.preference = match value {
                    "km" => PreferenceFamily::Km,
                    "vnm" => PreferenceFamily::Vnm,
                    "ez" => PreferenceFamily::Ez,
                    _ => {
                        return Err(CliError::Config(format!(
                            "key `preference`: expected km|vnm|ez, got `{value}`"
                        )))
                    }
                }
            }
            "rho" => self.rho = parse_f64(key, value)?,
            "lambda" => self.lambda = parse_f64(key, value)?,
            "ez_alpha" => self.ez_alpha = parse_f64(key, value)?,
            "ez_rho" => self.ez_rho = parse_f64(key, value)?,
            "ez_beta" => self.ez_beta = parse_f64(key, value)?,
            "sp0" => self.sp0 = parse_f64(key, value)?,
            "r_tl" => self.r_tl = parse_f64(key, value)?,
            "total_adequacy" => self.total_adequacy = parse_f64(key, value)?,
            "r" => self.r = parse_f64(key, value)?,
            "mu" => self.mu = parse_f64(key, value)?,
            "sigma" => self.sigma = parse_f64(key, value)?,
            "x0" => self.x0 = parse_auto_f64(key, value)?,
            "x0_scale" => self.x0_scale = parse_f64(key, value)?,
            "fund" => {
                self.fund = match value {
                    "annuity" => FundSelector::Annuity,
                    "individual" => FundSelector::Individual,
                    "collective_infinite" => FundSelector::CollectiveInfinite,
                    "collective_finite" => FundSelector::CollectiveFinite,
                    _ => {
                        return Err(CliError::Config(format!(
                            "key `fund`: expected annuity|individual|collective_infinite|collective_finite, got `{value}`"
                        )))
                    }
                }
            }
            "fund_n" => self.fund_n = parse_usize(key, value)?,
            "mortality_file" => {
                self.mortality_file = if value == "bundled" {
                    MortalitySource::Bundled
                } else {
                    MortalitySource::Path(value.to_string())
                }
            }
            "funding_mode" => {
                self.funding_mode = match value {
                    "fair_life" => FundingMode::FairLife,
                    "deterministic_term" => FundingMode::DeterministicTerm,
                    _ => {
                        return Err(CliError::Config(format!(
                            "key `funding_mode`: expected fair_life|deterministic_term, got `{value}`"
                        )))
                    }
                }
            }
            "n_wealth" => self.n_wealth = parse_usize(key, value)?,
            "n_consumption" => self.n_consumption = parse_usize(key, value)?,
            "n_pi" => self.n_pi = parse_usize(key, value)?,
            "quadrature_k" => self.quadrature_k = parse_usize(key, value)?,
            "pi_min" => self.pi_min = parse_f64(key, value)?,
            "pi_max" => self.pi_max = parse_f64(key, value)?,
            "wealth_min" => self.wealth_min = parse_auto_f64(key, value)?,
            "wealth_max" => self.wealth_max = parse_auto_f64(key, value)?,
            "seed" => {
                self.seed = value.parse::<u64>().map_err(|_| {
                    CliError::Config(format!("key `seed`: cannot parse `{value}` as an integer"))
                })?
            }
            "n_paths" => self.n_paths = parse_usize(key, value)?,
            "n_sims" => self.n_sims = parse_usize(key, value)?,
            "pop_n" => self.pop_n = parse_usize(key, value)?,
            "pop_power_min" => self.pop_power_min = parse_f64(key, value)?,
            "pop_power_max" => self.pop_power_max = parse_f64(key, value)?,
            "pop_wealth_min" => self.pop_wealth_min = parse_f64(key, value)?,
            "pop_wealth_max" => self.pop_wealth_max = parse_f64(key, value)?,
            "pop_age_min" | "pop_age_max" => {
                let v = value.parse::<u32>().map_err(|_| {
                    CliError::Config(format!("key `{key}`: cannot parse `{value}` as an age"))
                })?;
                if key == "pop_age_min" {
                    self.pop_age_min = v;
                } else {
                    self.pop_age_max = v;
                }
            }
            "pop_sex_split" => self.pop_sex_split = parse_f64(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a flat config text: one `key = value` per line, `#` comments
    /// and blank lines ignored.
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self, CliError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            CliError::Io(format!("reading {}: {e}", path.as_ref().display()))
        })?;
        Self::from_str(&text)
    }

    /// Serializes every key; parsing the result reproduces `self` exactly
    /// (float formatting round-trips).
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let auto = |x: &X0Spec| match x {
            X0Spec::Auto => "auto".to_string(),
            X0Spec::Value(v) => format!("{v}"),
        };
        let _ = writeln!(s, "preference = {}", match self.preference {
            PreferenceFamily::Km => "km",
            PreferenceFamily::Vnm => "vnm",
            PreferenceFamily::Ez => "ez",
        });
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "ez_alpha = {}", self.ez_alpha);
        let _ = writeln!(s, "ez_rho = {}", self.ez_rho);
        let _ = writeln!(s, "ez_beta = {}", self.ez_beta);
        let _ = writeln!(s, "sp0 = {}", self.sp0);
        let _ = writeln!(s, "r_tl = {}", self.r_tl);
        let _ = writeln!(s, "total_adequacy = {}", self.total_adequacy);
        let _ = writeln!(s, "r = {}", self.r);
        let _ = writeln!(s, "mu = {}", self.mu);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "x0 = {}", auto(&self.x0));
        let _ = writeln!(s, "x0_scale = {}", self.x0_scale);
        let _ = writeln!(s, "fund = {}", match self.fund {
            FundSelector::Annuity => "annuity",
            FundSelector::Individual => "individual",
            FundSelector::CollectiveInfinite => "collective_infinite",
            FundSelector::CollectiveFinite => "collective_finite",
        });
        let _ = writeln!(s, "fund_n = {}", self.fund_n);
        let _ = writeln!(s, "mortality_file = {}", match &self.mortality_file {
            MortalitySource::Bundled => "bundled",
            MortalitySource::Path(p) => p,
        });
        let _ = writeln!(s, "funding_mode = {}", match self.funding_mode {
            FundingMode::FairLife => "fair_life",
            FundingMode::DeterministicTerm => "deterministic_term",
        });
        let _ = writeln!(s, "n_wealth = {}", self.n_wealth);
        let _ = writeln!(s, "n_consumption = {}", self.n_consumption);
        let _ = writeln!(s, "n_pi = {}", self.n_pi);
        let _ = writeln!(s, "quadrature_k = {}", self.quadrature_k);
        let _ = writeln!(s, "pi_min = {}", self.pi_min);
        let _ = writeln!(s, "pi_max = {}", self.pi_max);
        let _ = writeln!(s, "wealth_min = {}", auto(&self.wealth_min));
        let _ = writeln!(s, "wealth_max = {}", auto(&self.wealth_max));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_paths = {}", self.n_paths);
        let _ = writeln!(s, "n_sims = {}", self.n_sims);
        let _ = writeln!(s, "pop_n = {}", self.pop_n);
        let _ = writeln!(s, "pop_power_min = {}", self.pop_power_min);
        let _ = writeln!(s, "pop_power_max = {}", self.pop_power_max);
        let _ = writeln!(s, "pop_wealth_min = {}", self.pop_wealth_min);
        let _ = writeln!(s, "pop_wealth_max = {}", self.pop_wealth_max);
        let _ = writeln!(s, "pop_age_min = {}", self.pop_age_min);
        let _ = writeln!(s, "pop_age_max = {}", self.pop_age_max);
        let _ = writeln!(s, "pop_sex_split = {}", self.pop_sex_split);
        s
    }

    /// Validates everything against the module preconditions and prices the
    /// budget, before any solve starts.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let market = MarketParams::new(self.r, self.mu, self.sigma).map_err(config)?;
        let table = match &self.mortality_file {
            MortalitySource::Bundled => bundled_table(),
            MortalitySource::Path(p) => load_mortality_csv(p).map_err(config)?,
        };
        let schedules =
            Schedules::new(self.sp0, self.r_tl, self.total_adequacy, table.t_grid())
                .map_err(config)?;
        if !(self.x0_scale > 0.0) || !self.x0_scale.is_finite() {
            return Err(CliError::Config(format!(
                "x0_scale must be positive and finite, got {}",
                self.x0_scale
            )));
        }
        let base_budget = match self.x0 {
            X0Spec::Auto => {
                adequacy_budget(&schedules, self.r, &table, self.funding_mode).map_err(config)?
            }
            X0Spec::Value(v) => v,
        };
        let budget = base_budget * self.x0_scale;
        if !(budget > 0.0) || !budget.is_finite() {
            return Err(CliError::Config(format!(
                "resolved budget must be positive, got {budget}"
            )));
        }

        let prefs = match self.preference {
            PreferenceFamily::Km => Some(PreferenceSpec::Km(
                KMPreferences::calibrated(self.rho, self.lambda, schedules.clone(), table.dt())
                    .map_err(config)?,
            )),
            PreferenceFamily::Vnm => Some(PreferenceSpec::Vnm(
                VNMPreferences::new(self.rho).map_err(config)?,
            )),
            PreferenceFamily::Ez => None,
        };
        let ez = match self.preference {
            PreferenceFamily::Ez => Some(
                EZPreferences::new(self.ez_alpha, self.ez_rho, self.ez_beta).map_err(config)?,
            ),
            _ => None,
        };

        let mut grid = GridConfig::for_budget(budget);
        grid.n_wealth = self.n_wealth;
        grid.n_consumption = self.n_consumption;
        grid.n_pi = self.n_pi;
        grid.quadrature_k = self.quadrature_k;
        grid.pi_bounds = (self.pi_min, self.pi_max);
        grid.spacing = Spacing::Log;
        if let X0Spec::Value(v) = self.wealth_min {
            grid.wealth_min = v;
        }
        if let X0Spec::Value(v) = self.wealth_max {
            grid.wealth_max = v;
        }
        grid.validate().map_err(config)?;

        let kind = match self.fund {
            FundSelector::Annuity => None,
            FundSelector::Individual => Some(FundKind::Individual),
            FundSelector::CollectiveInfinite => Some(FundKind::CollectiveInfinite),
            FundSelector::CollectiveFinite => {
                Some(FundKind::CollectiveFinite { n: self.fund_n })
            }
        };
        if let Some(k) = kind {
            k.resolve().map_err(config)?;
        }

        let payout =
            annuity_payout(budget, self.r, &table, self.funding_mode).map_err(config)?;

        Ok(Resolved {
            config: self.clone(),
            market,
            table,
            schedules,
            prefs,
            ez,
            grid,
            kind,
            budget,
            payout,
        })
    }
}

/// A validated run: every precondition checked, budget and benchmark payout
/// priced, nothing solved yet.
#[derive(Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub market: MarketParams,
    pub table: MortalityTable,
    pub schedules: Schedules,
    /// Present for km/vnm preferences.
    pub prefs: Option<PreferenceSpec>,
    /// Present for the ez preference.
    pub ez: Option<EZPreferences>,
    pub grid: GridConfig,
    /// `None` when the selected strategy is the annuity.
    pub kind: Option<FundKind>,
    pub budget: f64,
    pub payout: f64,
}

impl Resolved {
    fn prefs(&self) -> Result<&PreferenceSpec, CliError> {
        self.prefs.as_ref().ok_or_else(|| {
            CliError::Config("this command requires the km or vnm preference family".into())
        })
    }

    fn kind(&self) -> Result<FundKind, CliError> {
        self.kind.ok_or_else(|| {
            CliError::Config("this command requires a fund kind, not the annuity".into())
        })
    }

    fn solve(&self) -> Result<Solution, CliError> {
        solve_km(
            self.prefs()?,
            &self.market,
            &self.table,
            self.kind()?,
            &self.grid,
        )
        .map_err(solver)
    }

    /// Initial survivor-count slice of the selected kind.
    fn m0(&self) -> usize {
        match self.kind {
            Some(FundKind::CollectiveFinite { n }) => n.min(FundKind::N_MAX),
            _ => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn write_csv(
    out_dir: &Path,
    name: &str,
    seed: u64,
    header: &str,
    rows: &[String],
) -> Result<(), CliError> {
    let mut text = String::new();
    let _ = writeln!(text, "# seed = {seed}");
    let _ = writeln!(text, "{header}");
    for row in rows {
        let _ = writeln!(text, "{row}");
    }
    let path = out_dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn write_resolved_config(resolved: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    let path = out_dir.join("resolved_config.txt");
    fs::write(&path, resolved.config.to_config_string())
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn ensure_out_dir(out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

/// Solves the configured fund and writes the policy/value table
/// (`policy_<kind>.csv`; for the ez preference the consumption/investment
/// schedule `ez_schedule.csv`).
pub fn run_solve(resolved: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    ensure_out_dir(out_dir)?;
    if resolved.config.preference == PreferenceFamily::Ez {
        let ez = resolved.ez.as_ref().expect("resolved ez preference");
        let sol = solve_ez_homogeneous(
            ez,
            &resolved.market,
            &resolved.table,
            resolved.kind()?,
            resolved.grid.pi_bounds,
            resolved.grid.quadrature_k,
        )
        .map_err(solver)?;
        let rows: Vec<String> = (0..sol.t_grid.len())
            .map(|i| format!("{},{},{},{}", sol.t_grid[i], sol.c[i], sol.pi[i], sol.k[i]))
            .collect();
        write_csv(out_dir, "ez_schedule.csv", resolved.config.seed, "t,c,pi,k", &rows)?;
        return write_resolved_config(resolved, out_dir);
    }
    let sol = resolved.solve()?;
    let rows: Vec<String> = sol
        .rows()
        .map(|(t, x, m, gamma, pi, value)| format!("{t},{x},{m},{gamma},{pi},{value}"))
        .collect();
    let name = format!("policy_{}.csv", resolved.kind()?);
    write_csv(
        out_dir,
        &name,
        resolved.config.seed,
        "t,x,m,gamma,pi,value",
        &rows,
    )?;
    write_resolved_config(resolved, out_dir)
}

/// Gain of a strategy at the resolved budget: the annuity's death-mixture
/// gain, or the fund's optimal value.
fn strategy_gain(resolved: &Resolved, selector: FundSelector) -> Result<f64, CliError> {
    let prefs = resolved.prefs()?;
    match selector {
        FundSelector::Annuity => {
            annuity_gain(prefs, resolved.payout, &resolved.table).map_err(solver)
        }
        _ => {
            let kind = match selector {
                FundSelector::Individual => FundKind::Individual,
                FundSelector::CollectiveInfinite => FundKind::CollectiveInfinite,
                FundSelector::CollectiveFinite => FundKind::CollectiveFinite {
                    n: resolved.config.fund_n,
                },
                FundSelector::Annuity => unreachable!(),
            };
            let m0 = match kind.resolve().map_err(config)? {
                FundKind::CollectiveFinite { n } => n,
                _ => 1,
            };
            let sol = solve_km(prefs, &resolved.market, &resolved.table, kind, &resolved.grid)
                .map_err(solver)?;
            Ok(sol.value.value_at(0, m0, resolved.budget))
        }
    }
}

/// Compares annuity, individual account, and the configured collective at
/// the same budget: `metrics.csv` rows
/// `fund_kind,annuity_equivalent,outperformance`. The annuity row's
/// equivalent is its own budget by definition, so its outperformance is
/// exactly 0. No file is written if any strategy fails.
pub fn run_compare(resolved: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    let prefs = resolved.prefs()?;
    let collective = match resolved.config.fund {
        FundSelector::Annuity | FundSelector::Individual => FundSelector::CollectiveInfinite,
        other => other,
    };
    let collective_label = match collective {
        FundSelector::CollectiveFinite => {
            format!("{}", FundKind::CollectiveFinite { n: resolved.config.fund_n })
        }
        _ => format!("{}", FundKind::CollectiveInfinite),
    };

    // Compute everything first: a failure must not leave a partial CSV.
    let mut rows = Vec::new();
    rows.push(format!("annuity,{},{}", resolved.budget, 0.0));
    for (label, selector) in [
        ("individual".to_string(), FundSelector::Individual),
        (collective_label, collective),
    ] {
        let gain = strategy_gain(resolved, selector)?;
        let equivalent = annuity_equivalent(
            gain,
            prefs,
            &resolved.table,
            resolved.config.r,
            resolved.config.funding_mode,
        )
        .map_err(solver)?;
        let outperformance =
            annuity_outperformance(equivalent, resolved.budget).map_err(solver)?;
        rows.push(format!("{label},{equivalent},{outperformance}"));
    }

    ensure_out_dir(out_dir)?;
    write_csv(
        out_dir,
        "metrics.csv",
        resolved.config.seed,
        "fund_kind,annuity_equivalent,outperformance",
        &rows,
    )?;
    write_resolved_config(resolved, out_dir)
}

/// Simulates the configured strategy's consumption fan and writes
/// `fan_<kind>.csv` (`t,p5,p50,p95,sample`, alive-only percentiles, NaN when
/// nobody is alive) plus `fan_reference.csv` with the adequacy and annuity
/// curves.
pub fn run_fan(resolved: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    let t_grid = resolved.table.t_grid().to_vec();
    let (label, stats) = match resolved.config.fund {
        FundSelector::Annuity => {
            // A constant payout while alive: every percentile sits on it.
            let n = t_grid.len();
            let flat = vec![resolved.payout; n];
            (
                "annuity".to_string(),
                (flat.clone(), flat.clone(), flat.clone(), flat),
            )
        }
        _ => {
            let sol = resolved.solve()?;
            let paths = simulate_consumption_paths(
                &sol.policy,
                &resolved.market,
                &resolved.table,
                resolved.kind()?,
                resolved.budget,
                resolved.config.n_paths,
                resolved.config.seed,
            )
            .map_err(solver)?;
            let fan = fan_statistics(&paths.consumption, &paths.alive).map_err(solver)?;
            (
                format!("{}", resolved.kind()?),
                (fan.p5, fan.p50, fan.p95, fan.sample),
            )
        }
    };
    let (p5, p50, p95, sample) = stats;
    let rows: Vec<String> = (0..t_grid.len())
        .map(|i| format!("{},{},{},{},{}", t_grid[i], p5[i], p50[i], p95[i], sample[i]))
        .collect();
    let reference_rows: Vec<String> = (0..t_grid.len())
        .map(|i| {
            format!(
                "{},{},{}",
                t_grid[i],
                resolved.schedules.al_bar(i),
                resolved.payout
            )
        })
        .collect();

    ensure_out_dir(out_dir)?;
    write_csv(
        out_dir,
        &format!("fan_{label}.csv"),
        resolved.config.seed,
        "t,p5,p50,p95,sample",
        &rows,
    )?;
    write_csv(
        out_dir,
        "fan_reference.csv",
        resolved.config.seed,
        "t,adequacy,annuity",
        &reference_rows,
    )?;
    write_resolved_config(resolved, out_dir)
}

/// Runs the heterogeneous-fund experiment and writes the per-member report
/// (`hetero_report.csv`: `member_id,u_S,u_1,u_inf,OR`) and the optimality-
/// ratio histogram (`hetero_histogram.csv`, bin width 0.005).
pub fn run_hetero(resolved: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    let spec_pop = match resolved.config.pop_n {
        0 => return Err(CliError::Config("hetero requires pop_n >= 1".into())),
        n => PopulationSpec {
            n,
            power_range: (resolved.config.pop_power_min, resolved.config.pop_power_max),
            wealth_range: (resolved.config.pop_wealth_min, resolved.config.pop_wealth_max),
            retirement_age_range: (resolved.config.pop_age_min, resolved.config.pop_age_max),
            sex_split: resolved.config.pop_sex_split,
            seed: resolved.config.seed,
        },
    };
    let population = generate_population(&spec_pop, |sex, age| reference_table(sex, age).ok())
        .map_err(config)?;
    let run = run_hetero_mc(
        &population,
        &resolved.market,
        resolved.config.n_sims,
        resolved.config.seed,
    )
    .map_err(solver)?;

    let report_rows: Vec<String> = (0..population.len())
        .map(|i| {
            format!(
                "{},{},{},{},{}",
                population[i].id, run.u_s[i], run.u_1[i], run.u_inf[i], run.or[i]
            )
        })
        .collect();
    let histogram = or_histogram(&run.or).map_err(solver)?;
    let histogram_rows: Vec<String> = histogram
        .iter()
        .map(|(edge, count)| format!("{edge},{count}"))
        .collect();

    ensure_out_dir(out_dir)?;
    write_csv(
        out_dir,
        "hetero_report.csv",
        resolved.config.seed,
        "member_id,u_S,u_1,u_inf,OR",
        &report_rows,
    )?;
    write_csv(
        out_dir,
        "hetero_histogram.csv",
        resolved.config.seed,
        "bin_lower,count",
        &histogram_rows,
    )?;
    write_resolved_config(resolved, out_dir)
}

/// Solves the configured fund, Monte Carlo re-evaluates its policy at the
/// budget, and writes `evaluate.csv` comparing the two.
pub fn run_evaluate(resolved: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    let sol = resolved.solve()?;
    let dp_value = sol.value.value_at(0, resolved.m0(), resolved.budget);
    let mc = mc_gain(
        &sol.policy,
        resolved.prefs()?,
        &resolved.market,
        &resolved.table,
        resolved.kind()?,
        resolved.budget,
        resolved.config.n_paths,
        resolved.config.seed,
    )
    .map_err(solver)?;
    let row = format!(
        "{},{},{},{},{},{}",
        resolved.kind()?,
        dp_value,
        mc.estimate,
        mc.se,
        mc.clamped_below,
        mc.clamped_above
    );
    ensure_out_dir(out_dir)?;
    write_csv(
        out_dir,
        "evaluate.csv",
        resolved.config.seed,
        "fund_kind,dp_value,mc_estimate,mc_se,clamped_below,clamped_above",
        &[row],
    )?;
    write_resolved_config(resolved, out_dir)
}

/// Applies the worker cap from `COLLECTIVE_FUND_THREADS` (0 or unset: auto).
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(value) = std::env::var("COLLECTIVE_FUND_THREADS") {
        let n: usize = value.trim().parse().map_err(|_| {
            CliError::Config(format!(
                "COLLECTIVE_FUND_THREADS must be a non-negative integer, got `{value}`"
            ))
        })?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
    }
    Ok(())
}
