//! Run configuration: TOML files, `path=value` overrides and the config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use semidpo_core::datagen::GenProfile;
use semidpo_core::diffusion::ScheduleConfig;
use semidpo_core::model::{Activation, Arch};
use semidpo_core::rewards::RewardCommittee;
use semidpo_core::semitrain::PipelineConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            time_dim: 8,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Synthetic dataset profile; the committee lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub d: usize,
    pub d_c: usize,
    pub concentration: f64,
    pub noise_scale: f64,
    pub condition_scale: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_pairs: 5000,
            d: 4,
            d_c: 4,
            concentration: 1.0,
            noise_scale: 0.3,
            condition_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Timestep buckets reported besides the whole timeline.
    pub buckets: usize,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { buckets: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data.jsonl"),
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub committee: RewardCommittee,
    pub data: DataConfig,
    pub train: PipelineConfig,
    pub diagnose: DiagnoseConfig,
    pub paths: PathsConfig,
    /// Worker threads; 1 runs everything on the calling thread.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = PipelineConfig::default();
        train.eval.condition_scale = DataConfig::default().condition_scale;
        Self {
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            committee: RewardCommittee::standard(),
            data: DataConfig::default(),
            train,
            diagnose: DiagnoseConfig::default(),
            paths: PathsConfig::default(),
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Parses a possibly partial file. Tables are merged key by key over the
    /// defaults, so `[train.iter]` with only `steps` keeps the default `lr`
    /// of that phase; arrays replace the default wholesale.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let file: toml::Table = toml::from_str(text).map_err(|e| config(&e))?;
        let file = serde_json::to_value(file).map_err(|e| config(&e))?;
        let mut root = serde_json::to_value(Self::default()).map_err(|e| config(&e))?;
        merge(&mut root, file);
        serde_json::from_value(root).map_err(|e| config(&e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `a.b.c=value` overrides. The value is read as a TOML value
    /// (`5`, `1e-3`, `"semi"`, `[32, 32]`), falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> CliResult<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = serde_json::to_value(self).map_err(|e| CliError::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (path, value) = raw
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{raw}` is not path=value")))?;
            set_path(&mut root, path.trim(), parse_value(value.trim()))?;
        }
        serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.arch().validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        if self.diagnose.buckets == 0 || self.diagnose.buckets > self.schedule.steps {
            return Err(CliError::Config(format!(
                "diagnose.buckets must be in 1..={}",
                self.schedule.steps
            )));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            x_dim: self.data.d,
            cond_dim: self.data.d_c,
            time_dim: self.model.time_dim,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            horizon: self.schedule.steps,
        }
    }

    pub fn gen_profile(&self) -> GenProfile {
        GenProfile {
            n_pairs: self.data.n_pairs,
            d: self.data.d,
            d_c: self.data.d_c,
            committee: self.committee.clone(),
            concentration: self.data.concentration,
            noise_scale: self.data.noise_scale,
            condition_scale: self.data.condition_scale,
            seed: self.data.seed,
        }
    }

    /// SHA-256 of the canonical JSON form. The worker count is left out
    /// since results do not depend on it.
    pub fn hash(&self) -> String {
        let canonical = Self {
            workers: 1,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let unknown = || CliError::Config(format!("unknown config field `{}`", keys[..=i].join(".")));
        node = match node {
            Value::Object(map) => map.get_mut(*key).ok_or_else(unknown)?,
            Value::Array(items) => {
                let idx: usize = key.parse().map_err(|_| unknown())?;
                items.get_mut(idx).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *node = value;
    Ok(())
}
