//! Experiment configuration: a sectioned TOML schema, presets and overrides.
//!
//! ```toml
//! preset = "desk"          # optional base: "desk" or "paper"
//! seed = 0
//!
//! [data]
//! source = "auto"          # auto | mnist | synthetic
//! data_dir = "data/mnist"
//! fetch_base_url = ""
//! num_tasks = 5
//! permute_first_task = false
//! train_subset = 10000     # omit for the full split
//! eval_subset = 2000
//!
//! [data.synthetic]
//! samples_per_class = 1250
//! cluster_spread = 1.5
//!
//! [training]
//! epochs_per_task = 1
//! batch_size = 100
//! architecture = [784, 300, 150, 10]
//!
//! [optimizer]              # see OptimizerConfig
//! [strategy]               # see StrategyConfig
//!
//! [grid]
//! lambdas = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Keys in a file override the chosen preset; the `DATA_DIR` environment
//! variable overrides `data.data_dir`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::continual::StrategyConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::harness::log_grid;
use crate::model::Architecture;
use crate::optim::OptimizerConfig;

pub const DATA_DIR_ENV: &str = "DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// MNIST when the files are present in `data_dir`, synthetic otherwise.
    Auto,
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub samples_per_class: usize,
    pub cluster_spread: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            samples_per_class: 1250,
            cluster_spread: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub data_dir: PathBuf,
    pub fetch_base_url: String,
    pub num_tasks: usize,
    pub permute_first_task: bool,
    pub train_subset: Option<usize>,
    pub eval_subset: Option<usize>,
    pub synthetic: SyntheticSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Auto,
            data_dir: PathBuf::from("data/mnist"),
            fetch_base_url: String::new(),
            num_tasks: 10,
            permute_first_task: false,
            train_subset: None,
            eval_subset: None,
            synthetic: SyntheticSection::default(),
        }
    }
}

impl DataConfig {
    pub fn resolved_source(&self) -> DataSource {
        match self.source {
            DataSource::Auto if data::mnist_available(&self.data_dir) => DataSource::Mnist,
            DataSource::Auto => DataSource::Synthetic,
            s => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub architecture: Architecture,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 4,
            batch_size: 100,
            architecture: Architecture::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambdas: log_grid(1e-3, 1e3, 13).expect("static grid"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub optimizer: OptimizerConfig,
    pub strategy: StrategyConfig,
    pub grid: GridConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset: Some(preset),
            ..Self::default()
        };
        if preset == Preset::Desk {
            c.data.num_tasks = 5;
            c.data.train_subset = Some(10_000);
            c.data.eval_subset = Some(2_000);
            c.training.epochs_per_task = 1;
            c.grid.lambdas = log_grid(1e-3, 1e3, 7).expect("static grid");
        }
        c
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn paper() -> Self {
        Self::preset(Preset::Paper)
    }

    /// Parses a config document. `preset_override` replaces any `preset`
    /// key in the document as the base the document's keys apply to.
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match preset_override {
            Some(p) => Some(p),
            None => match doc.get("preset") {
                Some(toml::Value::String(s)) => Some(s.parse()?),
                Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
                None => None,
            },
        };
        let base = preset.map(Self::preset).unwrap_or_default();
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc);
        if let Some(p) = preset {
            merged.insert("preset".into(), toml::Value::try_from(p).expect("preset serializes"));
        }
        let config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset_override).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the `DATA_DIR` override if the variable is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            self.data.data_dir = PathBuf::from(dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("data.num_tasks", self.data.num_tasks),
            ("training.epochs_per_task", self.training.epochs_per_task),
            ("training.batch_size", self.training.batch_size),
            ("data.synthetic.samples_per_class", self.data.synthetic.samples_per_class),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        for (key, v) in [("data.train_subset", self.data.train_subset), ("data.eval_subset", self.data.eval_subset)] {
            if v == Some(0) {
                return Err(Error::Config(format!("{key} must be at least 1 when set")));
            }
        }
        if !(self.data.synthetic.cluster_spread > 0.0 && self.data.synthetic.cluster_spread.is_finite()) {
            return Err(Error::Config("data.synthetic.cluster_spread must be positive".into()));
        }
        let lambdas = &self.grid.lambdas;
        if lambdas.is_empty()
            || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite()))
            || lambdas.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::Config(format!(
                "grid.lambdas must be non-empty, non-negative and strictly increasing, got {lambdas:?}"
            )));
        }
        self.training.architecture.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optimizer.validate()?;
        self.strategy.validate()?;
        Ok(())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
