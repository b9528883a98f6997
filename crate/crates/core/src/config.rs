//! Experiment description read from TOML.
//!
//! Every section has defaults that reproduce the desk-scale synthetic run,
//! so an empty file is a valid configuration. Unknown keys are rejected and
//! all of them are reported at once, together with every value error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionConfig;
use crate::data::{Normalization, SynthConfig};
use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::sampler::SampleMode;
use crate::schedule::{default_shift, NoiseSchedule, ScheduleKind};

/// Keys that may appear although their default is absent.
const OPTIONAL_KEYS: [&str; 3] = ["data.root", "model.backbone_weights", "sampler.steps"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Folder dataset (`Imgs/`, `GT/`); the synthetic set is used when absent.
    pub root: Option<PathBuf>,
    pub synthetic: SynthConfig,
    pub resolution: usize,
    pub finetune_resolution: usize,
    pub hflip: bool,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: SynthConfig::default(),
            resolution: 64,
            finetune_resolution: 96,
            hflip: true,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    /// Offset on log SNR; ignored by the cosine kind.
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::SnrShifted,
            num_steps: 10,
            shift: default_shift(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.num_steps, self.shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Epochs at `data.resolution`.
    pub epochs: usize,
    /// Epochs at `data.finetune_resolution` after the first phase.
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint period in epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            finetune_epochs: 0,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    /// Reverse steps at inference; defaults to `schedule.num_steps`.
    pub steps: Option<usize>,
    pub seed: u64,
    pub batch_size: usize,
    pub dump_steps: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SampleMode::Single,
            steps: None,
            seed: 0,
            batch_size: 8,
            dump_steps: false,
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
        Self { dir: PathBuf::from("runs/desk") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub trainer: TrainerConfig,
    pub sampler: SamplerConfig,
    pub output: OutputConfig,
}

fn collect_unknown(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            Some(toml::Value::Table(k)) => match value {
                toml::Value::Table(u) => collect_unknown(u, k, &path, out),
                _ => out.push(format!("`{path}` must be a table")),
            },
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(format!("unknown key `{path}`")),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let known = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut errors = Vec::new();
        collect_unknown(&user, &known, "", &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Checks every value and reports all problems together.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let d = &self.data;
        if d.root.is_none() {
            d.synthetic.validate(&mut errors);
        }
        for (name, r) in [("resolution", d.resolution), ("finetune_resolution", d.finetune_resolution)] {
            if r == 0 || r % self.model.atcn.total_stride() != 0 {
                errors.push(format!(
                    "data.{name} must be a positive multiple of {}, got {r}",
                    self.model.atcn.total_stride()
                ));
            }
        }
        d.normalization.validate(&mut errors);
        if self.schedule.num_steps < 1 {
            errors.push("schedule.num_steps must be >= 1".into());
        }
        if !self.schedule.shift.is_finite() {
            errors.push(format!("schedule.shift must be finite, got {}", self.schedule.shift));
        }
        self.corruption.validate(&mut errors);
        self.model.validate(&mut errors);
        self.optimizer.validate(&mut errors);
        if self.trainer.batch_size < 1 {
            errors.push("trainer.batch_size must be >= 1".into());
        }
        if self.trainer.checkpoint_every < 1 {
            errors.push("trainer.checkpoint_every must be >= 1".into());
        }
        if self.sampler.steps == Some(0) {
            errors.push("sampler.steps must be >= 1".into());
        }
        if self.sampler.batch_size < 1 {
            errors.push("sampler.batch_size must be >= 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Reverse steps used at inference.
    pub fn sampling_steps(&self) -> usize {
        self.sampler.steps.unwrap_or(self.schedule.num_steps)
    }
}
