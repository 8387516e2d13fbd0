//! Experiment configuration: a TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use lsa_bootstrap::bootstrap::{StatisticKind, WeightLaw};
use lsa_bootstrap::garnet::{FeatureMap, RewardMode};
use lsa_bootstrap::lsa::{BurnIn, NoiseKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    NormalApprox,
    Coverage,
    Certify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    Garnet {
        n_states: usize,
        n_actions: usize,
        branching: usize,
        discount: f64,
        #[serde(default = "default_features")]
        features: FeatureMap,
        #[serde(default)]
        rewards: RewardMode,
        /// Seed for the MDP and the policy.
        #[serde(default)]
        mdp_seed: u64,
        /// Replay a saved MDP instead of generating one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mdp_file: Option<PathBuf>,
    },
    Synthetic {
        dim: usize,
        noise_a: f64,
        noise_b: f64,
        #[serde(default = "default_noise")]
        noise: NoiseKind,
        #[serde(default)]
        instance_seed: u64,
    },
}

fn default_features() -> FeatureMap {
    FeatureMap::Identity
}

fn default_noise() -> NoiseKind {
    NoiseKind::Gaussian
}

/// `c0` as a number or `"a3-max"`, the largest value admitted by the
/// problem's stability certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepConstant {
    Value(f64),
    Named(NamedStep),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedStep {
    A3Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPoint {
    #[default]
    Zero,
    ThetaStar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub c0: StepConstant,
    pub gammas: Vec<f64>,
    /// `"tail"` or `"fixed:<k>"`.
    pub burn_in: String,
    pub theta0: InitialPoint,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            c0: StepConstant::Value(4.0),
            gammas: vec![0.5],
            burn_in: "tail".into(),
            theta0: InitialPoint::Zero,
        }
    }
}

pub fn parse_burn_in(s: &str) -> Result<BurnIn, CliError> {
    if s == "tail" {
        return Ok(BurnIn::Tail);
    }
    s.strip_prefix("fixed:")
        .and_then(|k| k.parse().ok())
        .map(BurnIn::Fixed)
        .ok_or_else(|| CliError::Validation(format!("burn_in must be \"tail\" or \"fixed:<k>\", got {s:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalApproxSpec {
    pub n_grid: Vec<usize>,
    /// Trajectories per `(γ, n)`.
    pub replicas: usize,
    /// Draws from the limiting Gaussian.
    pub reference_sample: usize,
    /// Replace trajectories by a second reference sample.
    pub self_test: bool,
}

impl Default for NormalApproxSpec {
    fn default() -> Self {
        Self {
            n_grid: vec![400, 1600, 6400],
            replicas: 20_000,
            reference_sample: 200_000,
            self_test: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSpec {
    pub n_grid: Vec<usize>,
    pub runs: usize,
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self {
            n_grid: vec![4096],
            runs: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSpec {
    pub b: usize,
    pub levels: Vec<f64>,
    pub law: WeightLaw,
    pub statistic: StatisticKind,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            b: 200,
            levels: vec![0.9],
            law: WeightLaw::GaussianMean1,
            statistic: StatisticKind::NormBall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub weight: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, weight: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub normal_approx: NormalApproxSpec,
    #[serde(default)]
    pub coverage: CoverageSpec,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl ExperimentConfig {
    /// Parses TOML text, reporting syntax and schema errors with their
    /// line and column.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("invalid config: {e}")))
    }

    /// Parses TOML text and applies `key=value` overrides, where `key` is a
    /// dotted path and `value` is a TOML literal (bare words are strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let cfg = Self::from_toml(text)?;
        if overrides.is_empty() {
            return Ok(cfg);
        }
        let mut table: toml::Table = toml::from_str(text)
            .map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        table
            .try_into()
            .map_err(|e| CliError::Validation(format!("invalid config after overrides: {e}")))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Validation(m));
        let na = &self.normal_approx;
        if na.n_grid.is_empty() || na.n_grid.contains(&0) || !strictly_increasing(&na.n_grid) {
            return fail("normal_approx.n_grid must be positive and strictly increasing".into());
        }
        if na.replicas == 0 || na.reference_sample == 0 {
            return fail("normal_approx.replicas and reference_sample must be at least 1".into());
        }
        let cov = &self.coverage;
        if cov.n_grid.is_empty() || cov.n_grid.contains(&0) || !strictly_increasing(&cov.n_grid) {
            return fail("coverage.n_grid must be positive and strictly increasing".into());
        }
        if cov.runs == 0 {
            return fail("coverage.runs must be at least 1".into());
        }
        if self.schedule.gammas.is_empty() {
            return fail("schedule.gammas must not be empty".into());
        }
        for &g in &self.schedule.gammas {
            if !(0.5..1.0).contains(&g) {
                return fail(format!("schedule.gammas entry {g} outside [0.5, 1)"));
            }
        }
        if let StepConstant::Value(c) = self.schedule.c0 {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("schedule.c0 must be positive, got {c}"));
            }
        }
        parse_burn_in(&self.schedule.burn_in)?;
        for &l in &self.bootstrap.levels {
            if !(l > 0.0 && l < 1.0) {
                return fail(format!("bootstrap.levels entry {l} outside (0,1)"));
            }
        }
        if self.bootstrap.levels.is_empty() {
            return fail("bootstrap.levels must not be empty".into());
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {item:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override key {key:?} is malformed")));
    }
    let mut cursor = table;
    for part in &path[..path.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override key {key:?}: {part} is not a table")))?;
    }
    cursor.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
