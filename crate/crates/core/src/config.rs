//! Run configuration: TOML files layered over preset defaults, with
//! dotted-path overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::optim::SgdConfig;
use crate::train::{EmaConfig, ScheduleConfig, TrainPlan, TrainSettings};
use crate::vcr::VcrSettings;

pub const DEFAULT_PRESET: &str = "mini-vcr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub classes: usize,
    /// Input side used for cost reports.
    pub input_size: usize,
    /// Concept-module settings; present means enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcr: Option<VcrSettings>,
}

impl ModelConfig {
    pub fn for_preset(name: &str) -> Result<Self> {
        let spec = NetworkSpec::preset(name)?;
        Ok(ModelConfig {
            preset: name.to_string(),
            classes: spec.classes,
            input_size: spec.input_size,
            vcr: spec.vcr,
        })
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let spec = NetworkSpec {
            classes: self.classes,
            input_size: self.input_size,
            vcr: self.vcr.clone(),
            ..NetworkSpec::preset(&self.preset)?
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 directory or batch file.
    pub path: String,
    /// Seed of the synthetic generator; the test split uses `seed + 1`.
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    /// Size of the synthetic test split.
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: String::new(),
            seed: 1,
            synthetic: SyntheticSpec::default(),
            test_count: 256,
        }
    }
}

impl DataConfig {
    /// Training split when `train`, otherwise the test split.
    pub fn load(&self, train: bool) -> Result<Dataset> {
        match self.source {
            DataSource::Synthetic => {
                let spec = if train {
                    self.synthetic
                } else {
                    SyntheticSpec {
                        count: self.test_count,
                        ..self.synthetic
                    }
                };
                data::synthetic(&spec, if train { self.seed } else { self.seed + 1 })
            }
            DataSource::Cifar10 => {
                if self.path.is_empty() {
                    return Err(Error::config("data.path must name the CIFAR-10 directory"));
                }
                data::load_cifar10(Path::new(&self.path), train)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub steps: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub ema: EmaConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Config {
    /// Defaults for a preset: 500 steps and an EMA decay of 0.99, which
    /// suits runs of a few hundred steps.
    pub fn for_preset(name: &str) -> Result<Self> {
        let model = ModelConfig::for_preset(name)?;
        let mut data = DataConfig::default();
        data.synthetic.classes = model.classes;
        data.synthetic.size = model.input_size;
        Ok(Config {
            steps: 500,
            model,
            data,
            train: TrainSettings::default(),
            optimizer: SgdConfig::default(),
            schedule: ScheduleConfig::default(),
            ema: EmaConfig {
                decay: 0.99,
                ..EmaConfig::default()
            },
            output: OutputConfig::default(),
        })
    }

    /// Layer `file` over the preset it names (or the default preset), then
    /// apply `key=value` overrides. Unknown keys are rejected.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        Config::from_table(user)
    }

    pub fn from_table(user: Table) -> Result<Self> {
        let preset = match user.get("model").and_then(|m| m.get("preset")) {
            None => DEFAULT_PRESET.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::config(format!("model.preset must be a string, got {v}"))),
        };
        let mut merged = Config::for_preset(&preset)?.to_table();
        merge(&mut merged, user);
        let cfg: Config = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        self.model.network()?;
        self.schedule.schedule(self.steps)?;
        if self.data.source == DataSource::Synthetic && self.data.synthetic.classes != self.model.classes {
            return Err(Error::config(format!(
                "data.synthetic.classes {} differs from model.classes {}",
                self.data.synthetic.classes, self.model.classes
            )));
        }
        Ok(())
    }

    pub fn to_table(&self) -> Table {
        Table::try_from(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            seed,
            steps: self.steps,
            train: self.train.clone(),
            optimizer: self.optimizer.clone(),
            schedule: self.schedule,
            ema: self.ema,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Apply `a.b.c=value` to a table, creating intermediate tables.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut t = table;
    for part in &path[..path.len() - 1] {
        let entry = t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(inner) => inner,
            _ => return Err(Error::config(format!("override {key:?}: {part} is not a table"))),
        };
    }
    t.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Every leaf key of the default configuration with its default value,
/// including the concept-module keys under `model.vcr`.
pub fn keys_with_defaults() -> Vec<(String, String)> {
    fn walk(prefix: &str, t: &Table, out: &mut Vec<(String, String)>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(inner) => walk(&key, inner, out),
                other => out.push((key, other.to_string())),
            }
        }
    }
    let cfg = Config::for_preset(DEFAULT_PRESET).expect("default preset exists");
    let mut out = Vec::new();
    walk("", &cfg.to_table(), &mut out);
    out
}
