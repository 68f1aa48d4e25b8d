//! Run configuration: one TOML file shared by every CLI subcommand.
//!
//! Relative paths resolve against the directory holding the config file.
//! Unknown keys are errors, and parse errors carry line and column.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::synthdata::SynthConfig;
use crate::tft::{ModelConfig, DEFAULT_QUANTILES};
use crate::timegrid::{PrepareOptions, Schema, VariableSpec, DEFAULT_BIN_MINUTES, DEFAULT_HORIZON, LOOKBACK_CHOICES};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format event CSV; defaults to `<output_dir>/events.csv`.
    pub events: Option<PathBuf>,
    /// Static covariate CSV; defaults to `<output_dir>/statics.csv`.
    pub statics: Option<PathBuf>,
    /// JSON list of variable specs, used when `[[variables]]` is absent;
    /// defaults to `<output_dir>/schema.json`.
    pub schema: Option<PathBuf>,
    pub bin_minutes: u32,
    pub past_len: usize,
    pub horizon: usize,
    pub train_ratio: f64,
    pub forecast_start: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            events: None,
            statics: None,
            schema: None,
            bin_minutes: DEFAULT_BIN_MINUTES,
            past_len: LOOKBACK_CHOICES[2],
            horizon: DEFAULT_HORIZON,
            train_ratio: 0.8,
            forecast_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
    /// Restricts the forecast targets; all schema targets when empty.
    pub targets: Vec<String>,
    /// Restricts the past inputs to the targets plus these names; all
    /// schema inputs when `None`.
    pub extra_inputs: Option<Vec<String>>,
}

impl ModelSection {
    /// Network configuration for a dataset with `schema`. Selected targets
    /// lead the past inputs; known-future inputs outside the past inputs are
    /// dropped.
    pub fn model_config(&self, schema: &Schema, past_len: usize, horizon: usize, seed: u64) -> Result<ModelConfig, String> {
        let mut c = ModelConfig::from_schema(schema, past_len, horizon);
        c.hidden_size = self.hidden_size;
        c.num_heads = self.num_heads;
        c.dropout = self.dropout;
        c.quantiles = self.quantiles.clone();
        c.seed = seed;
        if !self.targets.is_empty() {
            if let Some(t) = self.targets.iter().find(|t| !c.targets.contains(t)) {
                return Err(format!("model target `{t}` is not a schema target"));
            }
            c.targets = self.targets.clone();
        }
        let rest: Vec<String> = match &self.extra_inputs {
            Some(extra) => {
                if let Some(x) = extra.iter().find(|x| !c.past_inputs.contains(x)) {
                    return Err(format!("extra input `{x}` is not a time-varying schema variable"));
                }
                extra.clone()
            }
            None => c.past_inputs.clone(),
        };
        let mut past = c.targets.clone();
        past.extend(rest.into_iter().filter(|x| !c.targets.contains(x)));
        c.known_future.retain(|k| past.contains(k));
        c.past_inputs = past;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            num_heads: 4,
            dropout: 0.3,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            targets: Vec::new(),
            extra_inputs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub max_order: usize,
    pub granger_lag: usize,
    pub alpha: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            max_order: 8,
            granger_lag: 4,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub channel: String,
    pub target: String,
    /// Test windows to run; all when `None`.
    pub max_subjects: Option<usize>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            channel: crate::synthdata::PRESSOR.into(),
            target: "mean_bp".into(),
            max_subjects: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Inline schema; overrides `data.schema`.
    pub variables: Vec<VariableSpec>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub baseline: BaselineSection,
    pub scenario: ScenarioSection,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            variables: Vec::new(),
            data: DataSection::default(),
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            baseline: BaselineSection::default(),
            scenario: ScenarioSection::default(),
            serve: ServeSection::default(),
        }
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: Config,
    pub path: PathBuf,
    /// SHA-256 of the file bytes, hex encoded.
    pub hash: String,
}

impl LoadedConfig {
    fn base(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base().join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir().join(name)
    }

    fn data_path(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.as_ref().map_or_else(|| self.output(default), |p| self.resolve(p))
    }

    pub fn events_path(&self) -> PathBuf {
        self.data_path(&self.config.data.events, "events.csv")
    }

    pub fn statics_path(&self) -> PathBuf {
        self.data_path(&self.config.data.statics, "statics.csv")
    }

    pub fn schema_path(&self) -> PathBuf {
        self.data_path(&self.config.data.schema, "schema.json")
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        let d = &self.config.data;
        PrepareOptions {
            bin_minutes: d.bin_minutes,
            past_len: d.past_len,
            horizon: d.horizon,
            train_ratio: d.train_ratio,
            seed: self.config.seed,
            forecast_start: d.forecast_start,
        }
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<Config, ConfigError> {
    let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: describe_toml_error(text, &e),
    })?;
    let invalid = |message: String| ConfigError::Invalid {
        path: path.to_path_buf(),
        message,
    };
    let d = &config.data;
    if d.bin_minutes == 0 || d.past_len == 0 || d.horizon == 0 {
        return Err(invalid("data.bin_minutes, data.past_len and data.horizon must be positive".into()));
    }
    if !(d.train_ratio > 0.0 && d.train_ratio < 1.0) {
        return Err(invalid(format!("data.train_ratio must lie in (0, 1), got {}", d.train_ratio)));
    }
    config.train.validate().map_err(|e| invalid(format!("train: {e}")))?;
    config.synth.validate().map_err(|e| invalid(format!("synth: {e}")))?;
    Ok(config)
}

/// Error text with an explicit `line L, column C` prefix.
fn describe_toml_error(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            format!("line {line}, column {col}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    let config = parse_config(&text, path)?;
    Ok(LoadedConfig {
        config,
        path: path.to_path_buf(),
        hash: hex::encode(Sha256::digest(&bytes)),
    })
}
