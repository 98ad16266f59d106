//! Experiment configuration: a versioned JSON document describing the dataset,
//! the model, training settings and the grid of runs.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cil_core::distill::{KdConfig, KdSchedule, KdScope};
use cil_core::frontend::FrontendConfig;
use cil_core::model::TcnConfig;
use cil_core::optim::AdamConfig;
use cil_core::scenario::{SyntheticParams, FSC_TASK_SIZES};
use cil_core::trainer::{Strategy, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must equal the version this binary understands.
    pub schema_version: u32,
    pub dataset: Dataset,
    #[serde(default)]
    pub model: TcnConfig,
    #[serde(default)]
    pub train: TrainSettings,
    pub strategies: Vec<StrategyName>,
    #[serde(default = "default_kd_configs")]
    pub kd_configs: Vec<KdCell>,
    /// Rehearsal capacities to sweep. Ignored by strategies without memory.
    pub memory_sizes: Vec<usize>,
    pub seeds: Vec<SeedPair>,
}

fn default_kd_configs() -> Vec<KdCell> {
    vec![KdCell::default()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Dataset {
    Synthetic(SyntheticDataset),
    Fsc(FscDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub generator: SyntheticParams,
    /// Seed of the sample draw; the class order comes from each run's
    /// order seed.
    #[serde(default)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FscDataset {
    /// Dataset root holding `data/{train,valid,test}_data.csv` and the audio.
    pub root: PathBuf,
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default = "fsc_task_sizes")]
    pub task_sizes: Vec<usize>,
}

fn fsc_task_sizes() -> Vec<usize> {
    FSC_TASK_SIZES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub gem_margin: f64,
    pub temperature: f64,
    pub schedule: KdSchedule,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSettings {
            epochs_per_task: base.epochs_per_task,
            batch_size: base.batch_size,
            optimizer: base.optimizer,
            gem_margin: base.gem_margin,
            temperature: base.kd.temperature,
            schedule: base.kd.schedule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Finetune,
    RehearsalRandom,
    RehearsalClosest,
    RehearsalIcarl,
    Gem,
    /// Joint training on every class at once: the upper bound.
    Offline,
}

impl StrategyName {
    pub fn core(self) -> Strategy {
        match self {
            StrategyName::Finetune | StrategyName::Offline => Strategy::Finetune,
            StrategyName::RehearsalRandom => Strategy::RehearsalRandom,
            StrategyName::RehearsalClosest => Strategy::RehearsalClosest,
            StrategyName::RehearsalIcarl => Strategy::RehearsalIcarl,
            StrategyName::Gem => Strategy::Gem,
        }
    }

    pub fn uses_memory(self) -> bool {
        self.core().selection().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Offline => "offline",
            other => other.core().name(),
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scopes of the two distillation terms for one grid column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KdCell {
    #[serde(default)]
    pub feature: KdScope,
    #[serde(default)]
    pub pred: KdScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SeedPair {
    /// Class-order shuffle.
    pub order: u64,
    /// Initialization, batch order and exemplar draws.
    pub train: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.strategies.is_empty() || self.kd_configs.is_empty() || self.seeds.is_empty() {
            bail!("strategies, kd_configs and seeds must each list at least one entry");
        }
        if self.strategies.iter().any(|s| s.uses_memory()) && self.memory_sizes.is_empty() {
            bail!("memory_sizes must be non-empty when a rehearsal or GEM strategy is listed");
        }
        self.model.validate()?;
        let n_mels = match &self.dataset {
            Dataset::Synthetic(d) => d.generator.feat_dim,
            Dataset::Fsc(d) => {
                d.frontend.validate()?;
                d.frontend.n_mels
            }
        };
        if n_mels != self.model.input_channels {
            bail!(
                "model.input_channels is {} but the dataset yields {n_mels} feature rows",
                self.model.input_channels
            );
        }
        for cell in &self.kd_configs {
            self.train_config(StrategyName::RehearsalRandom, *cell, 0, 0).validate()?;
        }
        Ok(())
    }

    /// Core training configuration for one grid cell.
    pub fn train_config(&self, strategy: StrategyName, kd: KdCell, memory: usize, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs_per_task: t.epochs_per_task,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            seed,
            strategy: strategy.core(),
            kd: KdConfig {
                feature: kd.feature,
                pred: kd.pred,
                temperature: t.temperature,
                schedule: t.schedule,
            },
            memory_capacity: memory,
            gem_margin: t.gem_margin,
        }
    }
}

/// Applies `key.path=value` overrides to a raw config document. Values are
/// parsed as JSON when possible and taken as plain strings otherwise; array
/// elements are addressed by index (`seeds.0.train=3`).
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for raw in overrides {
        let (path, value) = raw
            .split_once('=')
            .with_context(|| format!("override `{raw}` is not of the form key=value"))?;
        if path.is_empty() {
            bail!("override `{raw}` has an empty key");
        }
        let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        let mut node = &mut *doc;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let last = i + 1 == segments.len();
            node = match node {
                Value::Object(map) => {
                    if last {
                        map.insert((*seg).to_owned(), value.clone());
                        break;
                    }
                    map.entry((*seg).to_owned())
                        .or_insert_with(|| Value::Object(Default::default()))
                }
                Value::Array(items) => {
                    let idx: usize = seg
                        .parse()
                        .with_context(|| format!("override `{raw}`: `{seg}` is not an array index"))?;
                    let len = items.len();
                    let slot = items
                        .get_mut(idx)
                        .with_context(|| format!("override `{raw}`: index {idx} out of range ({len} items)"))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => bail!("override `{raw}`: `{seg}` does not address an object or array"),
            };
        }
    }
    Ok(())
}

/// Parses and validates a config document. Errors name the offending field.
pub fn parse_config(doc: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("invalid config at `{path}`: {}", e.into_inner())
    })?;
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc: Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    apply_overrides(&mut doc, overrides)?;
    parse_config(doc)
}

/// JSON Schema of [`ExperimentConfig`].
pub fn schema() -> Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}
