//! Run configuration: one TOML document drives every command, and flags
//! override individual fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dt4rec::evaluation::{EvalSettings, RewardTrainConfig};
use dt4rec::inference::PolicySettings;
use dt4rec::ingest::{
    LogFormat, SessionizeOptions, SplitFractions, SyntheticWorldConfig, MIN_INTERACTIONS,
};
use dt4rec::model::ModelConfig;
use dt4rec::training::TrainConfig;
use dt4rec::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DT4REC_OUT";

/// File name of the echoed configuration in every output directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Dataset bundle directory.
    pub bundle: Option<PathBuf>,
    /// Raw interaction log for `ingest`.
    pub log: Option<PathBuf>,
    /// Policy checkpoint for `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Reuse a fitted reward model instead of fitting one.
    pub reward_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub format: LogFormat,
    pub min_interactions: usize,
    pub sessionize: SessionizeOptions,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            format: LogFormat::default(),
            min_interactions: MIN_INTERACTIONS,
            sessionize: SessionizeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelSection {
    pub model: ModelConfig,
    pub train: RewardTrainConfig,
}

impl Default for RewardModelSection {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: RewardTrainConfig {
                epochs: 30,
                ..RewardTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    /// Training steps with a reward below this are removed.
    pub threshold: u32,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self { threshold: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    /// Percentages of high-reward training steps to keep, each in (0, 100].
    pub proportions: Vec<f64>,
    /// Lowest high reward; `K - 1` when unset.
    pub high_reward: Option<u32>,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            proportions: vec![10.0, 25.0, 40.0, 100.0],
            high_reward: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every seeded component when the config is resolved.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub synth: SyntheticWorldConfig,
    pub ingest: IngestConfig,
    pub split: SplitFractions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reward_model: RewardModelSection,
    pub policy: PolicySettings,
    pub eval: EvalSettings,
    pub ood: OodConfig,
    pub bc: BcConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read `path` (or start from defaults) and apply `key=value`
    /// overrides, where keys are dotted paths such as `train.epochs`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse()
                    .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Push the top-level seed into every component and check consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.reward_model.train.seed = self.seed;
        self.eval.variance_seed = self.seed;
        self.split.validate()?;
        let k = self.train.k as usize;
        if self.policy.k != k
            || self.eval.k as usize != k
            || self.reward_model.train.k as usize != k
        {
            return Err(Error::Config(format!(
                "retention window differs between sections: train {k}, policy {}, eval {}, reward model {}",
                self.policy.k, self.eval.k, self.reward_model.train.k
            )));
        }
        for &p in &self.bc.proportions {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Config(format!("proportion {p} is outside (0, 100]")));
            }
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Write the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Output directory: the configured one, else `$DT4REC_OUT/<command>`,
    /// else `runs/<command>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }

    pub fn bundle_path(&self) -> Result<&Path> {
        self.data.bundle.as_deref().ok_or_else(|| {
            Error::Config("no dataset bundle given (data.bundle or --bundle)".into())
        })
    }
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
