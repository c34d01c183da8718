//! Experiment configuration read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{build_default_gmm, GmmModel};
use crate::phy::{activation_probability, db_to_linear, PowerPolicy};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "AIRBREATH_OUT_DIR";

/// Default truncation threshold (activation probability 0.9).
pub const DEFAULT_THRESHOLD: f64 = 0.1054;

/// A transmission scheme under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchemeSpec {
    /// Closed-form depth on the current active count and SIR.
    AirBreath,
    /// Depth maximizing calibrated Monte Carlo accuracy.
    BruteForce,
    /// `S = D`, `G = 1`.
    NoAirBreathing,
    /// A fixed depth with `G = ⌊D/S⌋`.
    FixedDepth(usize),
    /// Random dimension selection with a surrogate-scanned depth.
    RandomAirBreathing,
}

impl SchemeSpec {
    pub fn name(&self) -> String {
        match self {
            SchemeSpec::AirBreath => "airbreath".into(),
            SchemeSpec::BruteForce => "brute_force".into(),
            SchemeSpec::NoAirBreathing => "no_airbreathing".into(),
            SchemeSpec::FixedDepth(s) => format!("fixed_bd({s})"),
            SchemeSpec::RandomAirBreathing => "random_airbreathing".into(),
        }
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for SchemeSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.trim();
        match t {
            "airbreath" => return Ok(SchemeSpec::AirBreath),
            "brute_force" => return Ok(SchemeSpec::BruteForce),
            "no_airbreathing" => return Ok(SchemeSpec::NoAirBreathing),
            "random_airbreathing" => return Ok(SchemeSpec::RandomAirBreathing),
            _ => {}
        }
        if let Some(inner) = t.strip_prefix("fixed_bd(").and_then(|r| r.strip_suffix(')')) {
            return match inner.trim().parse::<usize>() {
                Ok(d) if d >= 1 => Ok(SchemeSpec::FixedDepth(d)),
                _ => Err(format!("invalid fixed depth in '{t}'")),
            };
        }
        Err(format!("unknown scheme '{t}'"))
    }
}

impl TryFrom<String> for SchemeSpec {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<SchemeSpec> for String {
    fn from(s: SchemeSpec) -> String {
        s.name()
    }
}

/// Parameter swept across points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Sir,
    Sensors,
    Activation,
    Depth,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Sir => "sir",
            Axis::Sensors => "sensors",
            Axis::Activation => "activation",
            Axis::Depth => "depth",
        }
    }

    /// Grid used when a config does not list one.
    pub fn default_values(&self) -> Vec<f64> {
        match self {
            Axis::Sir => (-4..=4).map(|i| i as f64 * 5.0).collect(),
            Axis::Sensors => (1..=10).map(|i| i as f64 * 2.0).collect(),
            Axis::Activation => (1..=9).map(|i| i as f64 / 10.0).collect(),
            Axis::Depth => vec![1.0, 2.0, 5.0, 10.0, 25.0, 50.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

/// Where the class model comes from: the built-in benchmark model of a
/// given dimension, or a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            dim: Some(50),
            path: None,
        }
    }
}

impl ModelSpec {
    pub fn load(&self, base: Option<&Path>) -> Result<GmmModel> {
        match (&self.dim, &self.path) {
            (Some(_), Some(_)) => Err(Error::param("model: give either dim or path, not both")),
            (_, Some(p)) => {
                let full = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                GmmModel::load(&full)
            }
            (Some(d), None) => build_default_gmm(*d),
            (None, None) => build_default_gmm(50),
        }
    }
}

/// Sensor population and power settings.
///
/// At most one of `threshold`, `activation_probability`, `max_power`
/// fixes the truncation threshold (default `h_th = 0.1054`); at most one
/// of `sir_db`, `interference_power` fixes the interference (default
/// 0 dB).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default = "default_sensors")]
    pub sensors: usize,
    #[serde(default = "default_alignment")]
    pub alignment_power: f64,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub activation_probability: Option<f64>,
    #[serde(default)]
    pub max_power: Option<f64>,
    #[serde(default)]
    pub sir_db: Option<f64>,
    #[serde(default)]
    pub interference_power: Option<f64>,
}

fn default_sensors() -> usize {
    10
}

fn default_alignment() -> f64 {
    1.0
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            sensors: default_sensors(),
            alignment_power: default_alignment(),
            threshold: None,
            activation_probability: None,
            max_power: None,
            sir_db: None,
            interference_power: None,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sensors == 0 {
            return Err(Error::param("channel.sensors must be at least 1"));
        }
        if !(self.alignment_power > 0.0) || !self.alignment_power.is_finite() {
            return Err(Error::param("channel.alignment_power must be positive"));
        }
        let given = [self.threshold.is_some(), self.activation_probability.is_some(), self.max_power.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if given > 1 {
            return Err(Error::param(
                "channel: set only one of threshold, activation_probability, max_power",
            ));
        }
        if let Some(h) = self.threshold {
            if !(h >= 0.0) || !h.is_finite() {
                return Err(Error::param("channel.threshold must be nonnegative"));
            }
        }
        if let Some(p) = self.activation_probability {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::param("channel.activation_probability must be in (0, 1]"));
            }
        }
        if let Some(p) = self.max_power {
            if !(p > 0.0) {
                return Err(Error::param("channel.max_power must be positive"));
            }
        }
        if self.sir_db.is_some() && self.interference_power.is_some() {
            return Err(Error::param("channel: set only one of sir_db, interference_power"));
        }
        if let Some(p) = self.interference_power {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::param("channel.interference_power must be positive"));
            }
        }
        if let Some(db) = self.sir_db {
            if !db.is_finite() {
                return Err(Error::param("channel.sir_db must be finite"));
            }
        }
        Ok(())
    }

    pub fn interference(&self) -> f64 {
        match (self.interference_power, self.sir_db) {
            (Some(p), _) => p,
            (None, db) => self.alignment_power / db_to_linear(db.unwrap_or(0.0)),
        }
    }

    pub fn sir_db(&self) -> f64 {
        10.0 * (self.alignment_power / self.interference()).log10()
    }

    pub fn policy(&self) -> Result<PowerPolicy> {
        let p0 = self.alignment_power;
        let pi = self.interference();
        if let Some(pm) = self.max_power {
            return PowerPolicy::from_max_power(p0, pi, pm);
        }
        let h = match (self.threshold, self.activation_probability) {
            (Some(h), _) => h,
            (None, Some(p)) => -p.ln(),
            (None, None) => DEFAULT_THRESHOLD,
        };
        PowerPolicy::from_threshold(p0, pi, h.max(0.0))
    }

    pub fn activation(&self) -> Result<f64> {
        Ok(activation_probability(self.policy()?.threshold()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BruteForceConfig {
    #[serde(default = "default_calibration")]
    pub calibration_rounds: usize,
    #[serde(default)]
    pub full_grid: bool,
}

fn default_calibration() -> usize {
    500
}

impl Default for BruteForceConfig {
    fn default() -> Self {
        BruteForceConfig {
            calibration_rounds: default_calibration(),
            full_grid: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffConfig {
    /// Active sensors per round; defaults to the expected active count.
    #[serde(default)]
    pub active_sensors: Option<usize>,
    /// SIR values (dB) to scan; defaults to the channel SIR.
    #[serde(default)]
    pub sir_db: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimalDepthConfig {
    #[serde(default = "default_depth_sir_grid")]
    pub sir_db: Vec<f64>,
    #[serde(default = "default_depth_active_grid")]
    pub active_sensors: Vec<usize>,
}

fn default_depth_sir_grid() -> Vec<f64> {
    (-20..=20).map(|x| x as f64).collect()
}

fn default_depth_active_grid() -> Vec<usize> {
    (1..=20).collect()
}

impl Default for OptimalDepthConfig {
    fn default() -> Self {
        OptimalDepthConfig {
            sir_db: default_depth_sir_grid(),
            active_sensors: default_depth_active_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    /// Active sensors fused per trial; defaults to the expected active count.
    #[serde(default)]
    pub active_sensors: Option<usize>,
    /// Objects per class used for importance and normalization.
    #[serde(default = "default_training")]
    pub training_objects: usize,
}

fn default_trials() -> usize {
    2000
}

fn default_training() -> usize {
    500
}

impl Default for GenericConfig {
    fn default() -> Self {
        GenericConfig {
            trials: default_trials(),
            alpha: None,
            beta: None,
            active_sensors: None,
            training_objects: default_training(),
        }
    }
}

/// A complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeSpec>,
    /// Output directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub brute_force: BruteForceConfig,
    #[serde(default)]
    pub tradeoff: TradeoffConfig,
    #[serde(default)]
    pub optimal_depth: OptimalDepthConfig,
    #[serde(default)]
    pub generic: GenericConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_rounds() -> usize {
    2000
}

fn default_schemes() -> Vec<SchemeSpec> {
    vec![
        SchemeSpec::AirBreath,
        SchemeSpec::BruteForce,
        SchemeSpec::NoAirBreathing,
        SchemeSpec::FixedDepth(2),
        SchemeSpec::RandomAirBreathing,
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

/// Command-line values that replace file values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub sir_db: Option<f64>,
    pub sensors: Option<usize>,
    pub activation_probability: Option<f64>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates a config file; every failure is reported as a
    /// config error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let config_err = |message: String| Error::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read file: {e}")))?;
        let cfg = Self::from_toml_str(&text).map_err(config_err)?;
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.rounds {
            self.rounds = n;
        }
        if let Some(db) = o.sir_db {
            self.channel.sir_db = Some(db);
            self.channel.interference_power = None;
        }
        if let Some(k) = o.sensors {
            self.channel.sensors = k;
        }
        if let Some(p) = o.activation_probability {
            self.channel.activation_probability = Some(p);
            self.channel.threshold = None;
            self.channel.max_power = None;
        }
        if let Some(out) = &o.output {
            self.output = Some(out.clone());
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::param("rounds must be at least 1"));
        }
        if self.schemes.is_empty() {
            return Err(Error::param("at least one scheme is required"));
        }
        if self.brute_force.calibration_rounds == 0 {
            return Err(Error::param("brute_force.calibration_rounds must be at least 1"));
        }
        if self.generic.trials == 0 || self.generic.training_objects == 0 {
            return Err(Error::param("generic.trials and generic.training_objects must be at least 1"));
        }
        if let Some(a) = self.generic.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::param("generic.alpha must be in (0, 1]"));
            }
        }
        if let Some(b) = self.generic.beta {
            if !(b > 0.0) {
                return Err(Error::param("generic.beta must be positive"));
            }
        }
        if let (Some(_), Some(_)) = (self.model.dim, &self.model.path) {
            return Err(Error::param("model: give either dim or path, not both"));
        }
        if matches!(self.model.dim, Some(d) if d < 2) {
            return Err(Error::param("model.dim must be at least 2"));
        }
        if let Some(sweep) = &self.sweep {
            if let Some(v) = &sweep.values {
                if v.is_empty() {
                    return Err(Error::param("sweep.values must not be empty"));
                }
            }
        }
        if self.optimal_depth.active_sensors.iter().any(|&k| k == 0) {
            return Err(Error::param("optimal_depth.active_sensors must be positive"));
        }
        self.channel.validate()
    }

    /// Output directory: config value, else the environment variable, else
    /// `results`.
    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"))
    }

    /// Active sensors expected per round, at least one.
    pub fn expected_active(&self) -> Result<usize> {
        let p = self.channel.activation()?;
        Ok(((self.channel.sensors as f64 * p).round() as usize).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = ExperimentConfig::default();
        assert_eq!(c.rounds, 2000);
        assert_eq!(c.channel.sensors, 10);
        assert!((c.channel.activation().unwrap() - 0.9).abs() < 1e-4);
        assert_eq!(c.channel.sir_db(), 0.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in ["airbreath", "brute_force", "no_airbreathing", "fixed_bd(25)", "random_airbreathing"] {
            assert_eq!(s.parse::<SchemeSpec>().unwrap().name(), s);
        }
        assert!("fixed_bd(0)".parse::<SchemeSpec>().is_err());
        assert!("magic".parse::<SchemeSpec>().is_err());
    }

    #[test]
    fn nested_sections_and_unknown_keys() {
        let text = r#"
            name = "fig"
            seed = 3
            rounds = 100
            schemes = ["airbreath", "fixed_bd(2)"]
            [channel]
            sensors = 8
            activation_probability = 0.5
            sir_db = -5.0
            [sweep]
            axis = "sir"
            values = [-20.0, 0.0]
        "#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.schemes, vec![SchemeSpec::AirBreath, SchemeSpec::FixedDepth(2)]);
        assert_eq!(c.sweep.as_ref().unwrap().axis, Axis::Sir);
        let p = c.channel.policy().unwrap();
        assert!((p.activation_probability() - 0.5).abs() < 1e-12);
        assert!((p.sir() - db_to_linear(-5.0)).abs() < 1e-12);

        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[channel]\nfoo = 2").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\naxis = \"time\"").is_err());
    }

    #[test]
    fn validation_rules() {
        let mut c = ExperimentConfig::default();
        c.rounds = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.channel.threshold = Some(0.1);
        c.channel.activation_probability = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.channel.interference_power = Some(-1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = ExperimentConfig::from_toml_str("seed = 1\n[channel]\nthreshold = 0.3\nsir_db = 4.0").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            rounds: Some(7),
            sir_db: Some(-2.0),
            sensors: Some(3),
            activation_probability: Some(0.25),
            output: Some("x".into()),
            threads: Some(2),
        });
        assert_eq!((c.seed, c.rounds, c.channel.sensors), (9, 7, 3));
        assert!((c.channel.sir_db() + 2.0).abs() < 1e-12);
        assert!((c.channel.activation().unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(c.output_dir(), PathBuf::from("x"));
        assert!(c.validate().is_ok());
    }
}
