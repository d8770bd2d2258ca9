//! Experiment configuration: parsing with field paths and semantic checks.

use std::fmt;

use rwre_core::env::{EnvironmentSpec, ProfileLaw};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    #[serde(rename = "quenched-rate-1d")]
    QuenchedRate1d,
    FiniteOracle,
    AveragedRate,
    SpacetimeGn,
    SpacetimeDoob,
    Conditioning,
    CrossCheck,
}

/// Experiment kinds with a one-line description of what each reproduces.
pub const CATALOG: [(Kind, &str, &str); 7] = [
    (Kind::QuenchedRate1d, "quenched-rate-1d", "r(ξ)−ξλ(r(ξ)) on a velocity grid for a 1D environment"),
    (Kind::FiniteOracle, "finite-oracle", "Perron-root rate, Doob minimizer and grid search on a finite periodic chain"),
    (Kind::AveragedRate, "averaged-rate", "regeneration-slab estimate of the averaged rate and its LMGF"),
    (Kind::SpacetimeGn, "spacetime-gn", "meeting-time recursion check for the L2 norms G_N"),
    (Kind::SpacetimeDoob, "spacetime-doob", "Doob-transformed kernel, fixed-point identity and stationarity"),
    (Kind::Conditioning, "conditioning", "conditional empirical step law against the tilted measure"),
    (Kind::CrossCheck, "cross-check", "quenched rate by the ζ route and by the Perron route on one grid"),
];

impl Kind {
    pub fn name(self) -> &'static str {
        CATALOG.iter().find(|c| c.0 == self).map(|c| c.1).unwrap()
    }
}

/// A chain read from JSON: profile rows per state and the step list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub states: usize,
    pub steps: Vec<i64>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Master seed; every random stream of the run derives from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSpec>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
    pub line: Option<usize>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{} (line {l}): {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.to_string(), message: message.into(), line: None }
}

fn from_path_error(prefix: &str, e: serde_path_to_error::Error<serde_json::Error>, line: bool) -> ConfigError {
    let inner = e.path().to_string();
    let path = match (prefix.is_empty(), inner.as_str()) {
        (true, _) => inner.clone(),
        (false, ".") => prefix.to_string(),
        (false, _) => format!("{prefix}.{inner}"),
    };
    let l = if line { Some(e.inner().line()) } else { None };
    ConfigError { path: if path.is_empty() { ".".into() } else { path }, message: e.inner().to_string(), line: l }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| from_path_error("", e, true))
}

pub fn parse_params<T: DeserializeOwned>(v: &serde_json::Value) -> Result<T, ConfigError> {
    let v = if v.is_null() { serde_json::json!({}) } else { v.clone() };
    serde_path_to_error::deserialize(v).map_err(|e| from_path_error("params", e, false))
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(err(path, format!("must be positive, got {v}")))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(err(path, format!("must be at least {min}, got {v}")))
    }
}

fn grid(path: &str, g: &[f64]) -> Result<(), ConfigError> {
    if g.is_empty() {
        return Err(err(path, "grid is empty"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(err(path, "grid has a non-finite entry"));
    }
    if g.windows(2).any(|w| w[1] <= w[0]) {
        return Err(err(path, "grid must be strictly increasing"));
    }
    Ok(())
}

fn finite_vec(path: &str, v: &[f64]) -> Result<(), ConfigError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(err(path, "non-finite entry"))
    }
}

fn default_window() -> i64 {
    20_000
}
fn default_tol() -> f64 {
    1e-13
}
fn default_agreement() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuenchedRateParams {
    pub xi_grid: Vec<f64>,
    /// Realization seed; derived from the master seed when absent.
    #[serde(default)]
    pub env_seed: Option<u64>,
    #[serde(default = "default_window")]
    pub window: i64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossCheckParams {
    pub xi_grid: Vec<f64>,
    /// Realization seed; derived from the master seed when absent.
    #[serde(default)]
    pub env_seed: Option<u64>,
    #[serde(default = "default_window")]
    pub window: i64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Largest |I_zeta - I_perron| accepted without a flag.
    #[serde(default = "default_agreement")]
    pub agreement_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteOracleParams {
    pub xi_grid: Vec<f64>,
    /// Grid-search resolution for the minimizer certificate (skipped when absent).
    #[serde(default)]
    pub grid_resolution: Option<f64>,
    /// Brute-force LMGF horizon used to cross-check the Perron root at theta = 0.5.
    #[serde(default)]
    pub brute_force_n: Option<usize>,
}

fn default_slabs() -> usize {
    200_000
}
fn default_horizon() -> usize {
    60
}
fn default_path_len() -> usize {
    50_000
}
fn default_budget() -> u64 {
    2_000_000_000
}
fn default_resamples() -> usize {
    200
}
fn default_level() -> f64 {
    0.99
}
fn default_censoring() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabParams {
    pub direction: Vec<f64>,
    #[serde(default = "default_slabs")]
    pub slabs: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_path_len")]
    pub path_len: usize,
    #[serde(default = "default_budget")]
    pub max_total_steps: u64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Censored-candidate fraction above which the run is flagged.
    #[serde(default = "default_censoring")]
    pub censoring_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragedRateParams {
    pub harvest: SlabParams,
    pub xi_grid: Vec<f64>,
    /// Also compute the quenched rate on the same grid (1D only).
    #[serde(default)]
    pub compare_quenched: bool,
    #[serde(default = "default_window")]
    pub window: i64,
}

fn default_n_max() -> usize {
    14
}
fn default_k_max() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloParams {
    pub replicates: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacetimeGnParams {
    pub theta: Vec<f64>,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub monte_carlo: Option<MonteCarloParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityParams {
    pub depth: usize,
    pub u_depth: usize,
    pub replicates: usize,
    /// h = 1{profile at the origin has this index}.
    #[serde(default)]
    pub profile: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacetimeDoobParams {
    pub theta: Vec<f64>,
    pub depth: usize,
    #[serde(default)]
    pub time: i64,
    #[serde(default)]
    pub x: Option<Vec<i64>>,
    /// Realization seed; derived from the master seed when absent.
    #[serde(default)]
    pub env_seed: Option<u64>,
    #[serde(default)]
    pub stationarity: Option<StationarityParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Averaged,
    Quenched,
}

fn default_mode() -> ModeName {
    ModeName::Averaged
}
fn default_environments() -> usize {
    5
}
fn default_accepted() -> usize {
    4000
}
fn default_proposals() -> usize {
    20_000_000
}
fn default_tilt_replicates() -> usize {
    40_000
}
fn default_two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningParams {
    pub xi: Vec<f64>,
    pub delta: f64,
    pub n_grid: Vec<usize>,
    /// Observable: frequency of this step.
    pub step: Vec<i64>,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default = "default_environments")]
    pub environments: usize,
    #[serde(default = "default_accepted")]
    pub accepted: usize,
    #[serde(default = "default_proposals")]
    pub max_proposals: usize,
    /// Space-time tilted estimator.
    #[serde(default = "default_tilt_replicates")]
    pub tilt_replicates: usize,
    #[serde(default = "default_two")]
    pub n_before: usize,
    #[serde(default = "default_two")]
    pub m_after: usize,
    /// Static environments: slab harvest for the tilted slab measure.
    #[serde(default)]
    pub slabs: Option<SlabParams>,
}

fn check_slabs(prefix: &str, p: &SlabParams) -> Result<(), ConfigError> {
    let f = |name: &str| format!("{prefix}.{name}");
    finite_vec(&f("direction"), &p.direction)?;
    at_least(&f("slabs"), p.slabs, 100)?;
    at_least(&f("horizon"), p.horizon, 1)?;
    if p.path_len <= 2 * p.horizon {
        return Err(err(&f("path_len"), "must exceed twice the horizon"));
    }
    at_least(&f("bootstrap_resamples"), p.bootstrap_resamples, 10)?;
    if !(p.level > 0.0 && p.level < 1.0) {
        return Err(err(&f("level"), format!("must lie in (0, 1), got {}", p.level)));
    }
    positive(&f("censoring_threshold"), p.censoring_threshold)
}

/// Typed parameters after validation.
#[derive(Debug, Clone)]
pub enum Params {
    QuenchedRate1d(QuenchedRateParams),
    FiniteOracle(FiniteOracleParams),
    AveragedRate(AveragedRateParams),
    SpacetimeGn(SpacetimeGnParams),
    SpacetimeDoob(SpacetimeDoobParams),
    Conditioning(ConditioningParams),
    CrossCheck(CrossCheckParams),
}

fn need_env(cfg: &ExperimentConfig) -> Result<&EnvironmentSpec, ConfigError> {
    let env = cfg.environment.as_ref().ok_or_else(|| err("environment", "required for this experiment"))?;
    env.validate().map_err(|e| err("environment", e.to_string()))?;
    Ok(env)
}

fn need_dim(env: &EnvironmentSpec, path: &str, v: usize) -> Result<(), ConfigError> {
    if v != env.dimension {
        return Err(err(path, format!("has {v} entries but the environment has dimension {}", env.dimension)));
    }
    Ok(())
}

/// Parse and check `params` for the configured kind.
pub fn validate(cfg: &ExperimentConfig) -> Result<Params, ConfigError> {
    Ok(match cfg.kind {
        Kind::QuenchedRate1d => {
            let p: QuenchedRateParams = parse_params(&cfg.params)?;
            let env = need_env(cfg)?;
            if env.dimension != 1 || env.is_space_time() {
                return Err(err("environment", "quenched-rate-1d needs a static 1D environment"));
            }
            grid("params.xi_grid", &p.xi_grid)?;
            positive("params.tol", p.tol)?;
            if p.window < 100 {
                return Err(err("params.window", "must be at least 100"));
            }
            Params::QuenchedRate1d(p)
        }
        Kind::CrossCheck => {
            let p: CrossCheckParams = parse_params(&cfg.params)?;
            let env = need_env(cfg)?;
            if env.dimension != 1 || env.is_space_time() {
                return Err(err("environment", "cross-check needs a 1D periodic environment"));
            }
            grid("params.xi_grid", &p.xi_grid)?;
            positive("params.tol", p.tol)?;
            positive("params.agreement_tol", p.agreement_tol)?;
            if p.window < 100 {
                return Err(err("params.window", "must be at least 100"));
            }
            Params::CrossCheck(p)
        }
        Kind::FiniteOracle => {
            let p: FiniteOracleParams = parse_params(&cfg.params)?;
            match (&cfg.environment, &cfg.chain) {
                (None, None) => return Err(err("chain", "finite-oracle needs a chain or a periodic environment")),
                (Some(_), Some(_)) => return Err(err("chain", "give either a chain or an environment, not both")),
                (Some(_), None) => {
                    need_env(cfg)?;
                }
                (None, Some(c)) => {
                    if c.rows.len() != c.states {
                        return Err(err("chain.rows", format!("{} rows for {} states", c.rows.len(), c.states)));
                    }
                }
            }
            grid("params.xi_grid", &p.xi_grid)?;
            if let Some(h) = p.grid_resolution {
                positive("params.grid_resolution", h)?;
            }
            if let Some(n) = p.brute_force_n {
                at_least("params.brute_force_n", n, 1)?;
            }
            Params::FiniteOracle(p)
        }
        Kind::AveragedRate => {
            let p: AveragedRateParams = parse_params(&cfg.params)?;
            let env = need_env(cfg)?;
            need_dim(env, "params.harvest.direction", p.harvest.direction.len())?;
            check_slabs("params.harvest", &p.harvest)?;
            grid("params.xi_grid", &p.xi_grid)?;
            if p.compare_quenched && (env.dimension != 1 || env.is_space_time()) {
                return Err(err("params.compare_quenched", "only available for static 1D environments"));
            }
            Params::AveragedRate(p)
        }
        Kind::SpacetimeGn => {
            let p: SpacetimeGnParams = parse_params(&cfg.params)?;
            let env = need_env(cfg)?;
            if !env.is_space_time() {
                return Err(err("environment.structure", "spacetime-gn needs a space-time environment"));
            }
            need_dim(env, "params.theta", p.theta.len())?;
            finite_vec("params.theta", &p.theta)?;
            at_least("params.n_max", p.n_max, 1)?;
            if p.n_max > p.k_max + 2 {
                return Err(err("params.k_max", "must be at least n_max - 2"));
            }
            if let Some(mc) = &p.monte_carlo {
                at_least("params.monte_carlo.replicates", mc.replicates, 2)?;
                at_least("params.monte_carlo.depth", mc.depth, 1)?;
            }
            Params::SpacetimeGn(p)
        }
        Kind::SpacetimeDoob => {
            let p: SpacetimeDoobParams = parse_params(&cfg.params)?;
            let env = need_env(cfg)?;
            if !env.is_space_time() {
                return Err(err("environment.structure", "spacetime-doob needs a space-time environment"));
            }
            need_dim(env, "params.theta", p.theta.len())?;
            finite_vec("params.theta", &p.theta)?;
            at_least("params.depth", p.depth, 1)?;
            if let Some(x) = &p.x {
                need_dim(env, "params.x", x.len())?;
            }
            if let Some(s) = &p.stationarity {
                at_least("params.stationarity.replicates", s.replicates, 2)?;
            }
            Params::SpacetimeDoob(p)
        }
        Kind::Conditioning => {
            let p: ConditioningParams = parse_params(&cfg.params)?;
            let env = need_env(cfg)?;
            need_dim(env, "params.xi", p.xi.len())?;
            need_dim(env, "params.step", p.step.len())?;
            finite_vec("params.xi", &p.xi)?;
            positive("params.delta", p.delta)?;
            if p.n_grid.is_empty() || p.n_grid.windows(2).any(|w| w[1] <= w[0]) || p.n_grid[0] == 0 {
                return Err(err("params.n_grid", "must be a strictly increasing list of positive lengths"));
            }
            at_least("params.accepted", p.accepted, 2)?;
            at_least("params.tilt_replicates", p.tilt_replicates, 2)?;
            if !env.is_space_time() {
                let s = p.slabs.as_ref().ok_or_else(|| err("params.slabs", "required for static environments"))?;
                need_dim(env, "params.slabs.direction", s.direction.len())?;
                check_slabs("params.slabs", s)?;
                if p.mode == ModeName::Quenched {
                    return Err(err("params.mode", "quenched conditioning is only available in space-time"));
                }
            }
            Params::Conditioning(p)
        }
    })
}

/// Default two-profile space-time spec in dimension d, used by the st-* shortcuts.
pub fn builtin_space_time(d: usize, seed: u64) -> EnvironmentSpec {
    let (a, b) = if d == 1 {
        (vec![0.8, 0.2], vec![0.4, 0.6])
    } else {
        let rest = 0.6 / (2 * d - 2) as f64;
        let mut a = vec![rest; 2 * d];
        let mut b = vec![rest; 2 * d];
        a[0] = 0.3;
        a[1] = 0.1;
        b[0] = 0.1;
        b[1] = 0.3;
        (a, b)
    };
    EnvironmentSpec::space_time(d, ProfileLaw::Finite { profiles: vec![a, b], weights: vec![0.5, 0.5] }, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(params: &str) -> String {
        format!(
            r#"{{"kind": "quenched-rate-1d", "seed": 1,
  "environment": {{"dimension": 1, "structure": {{"kind": "static"}},
                  "law": {{"kind": "deterministic", "profile": [0.75, 0.25]}}, "seed": 0}},
  "params": {params}}}"#
        )
    }

    #[test]
    fn negative_tolerance_names_the_field() {
        let cfg = parse_config(&base(r#"{"xi_grid": [0.6, 0.7], "tol": -1}"#)).unwrap();
        let e = validate(&cfg).unwrap_err();
        assert_eq!(e.path, "params.tol");
        assert!(e.message.contains("positive"));
    }

    #[test]
    fn unknown_field_is_located() {
        let e = parse_config(&base(r#"{"xi_grid": [0.6], "tolerance": 1}"#))
            .map(|c| validate(&c).unwrap_err())
            .unwrap();
        assert!(e.path.starts_with("params"), "{e}");
        assert!(e.message.contains("tolerance"));
        let e = parse_config("{\n \"kind\": \"quenched-rate-1d\",\n \"seeed\": 3}").unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn grids_must_increase() {
        let cfg = parse_config(&base(r#"{"xi_grid": [0.7, 0.6]}"#)).unwrap();
        assert_eq!(validate(&cfg).unwrap_err().path, "params.xi_grid");
    }

    #[test]
    fn seed_is_required() {
        let e = parse_config(r#"{"kind": "cross-check", "params": {}}"#).unwrap_err();
        assert!(e.message.contains("seed"));
    }

    #[test]
    fn catalog_has_seven_kinds() {
        assert_eq!(CATALOG.len(), 7);
        for (k, name, _) in CATALOG {
            let v: Kind = serde_json::from_value(serde_json::Value::String(name.into())).unwrap();
            assert_eq!(v, k);
        }
    }

    #[test]
    fn builtin_specs_validate() {
        for d in 1..=3 {
            builtin_space_time(d, 0).validate().unwrap();
        }
    }
}
