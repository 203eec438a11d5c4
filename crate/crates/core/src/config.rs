//! The run configuration: one TOML file covering every stage.
//!
//! Every section and field is optional and falls back to its default;
//! unknown keys are rejected. `version` must be [`CONFIG_VERSION`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierConfig, Phase, TrainingStrategy};
use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{GuidanceConfig, ScheduleConfig};
use crate::embedding::TokenEmbedder;
use crate::error::{Error, Result};
use crate::mixer::MixerConfig;
use crate::pipeline::{AugmentConfig, FinetuneConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub m: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { m: 16, d: 32, seed: 0 }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<TokenEmbedder> {
        TokenEmbedder::new(self.seed, self.m, self.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Baseline,
    Combined,
    Rsp,
    TwoPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: ClassifierConfig,
    pub strategies: Vec<StrategyName>,
    /// RSP admission probability.
    pub p: f64,
    /// Fine-tune phase of two-phase training; phase 1 is `model.phase`.
    pub phase2: Phase,
    pub seeds: Vec<u64>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let model = ClassifierConfig::default();
        ClassifierSection {
            phase2: Phase {
                steps: model.phase.steps / 2,
                lr: model.phase.lr / 2.0,
            },
            model,
            strategies: vec![
                StrategyName::Baseline,
                StrategyName::Combined,
                StrategyName::Rsp,
                StrategyName::TwoPhase,
            ],
            p: 0.8,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ClassifierSection {
    pub fn strategy(&self, name: StrategyName) -> Result<TrainingStrategy> {
        match name {
            StrategyName::Baseline => Ok(TrainingStrategy::Baseline),
            StrategyName::Combined => Ok(TrainingStrategy::Combined),
            StrategyName::Rsp => TrainingStrategy::rsp(self.p),
            StrategyName::TwoPhase => TrainingStrategy::two_phase(self.model.phase, self.phase2),
        }
    }

    pub fn strategies(&self) -> Result<Vec<TrainingStrategy>> {
        self.strategies.iter().map(|&s| self.strategy(s)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Parent of the per-run directories; the CLI falls back to an
    /// environment variable, then `runs`.
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub embedder: EmbedderConfig,
    pub mixer: MixerConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub denoiser: DenoiserConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub diffusion: FinetuneConfig,
    pub augment: AugmentSection,
    pub classifier: ClassifierSection,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Synthetic images per real image, per class.
    pub ratio: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection { ratio: 3.0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            embedder: EmbedderConfig::default(),
            mixer: MixerConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            denoiser: DenoiserConfig::default(),
            codec: CodecConfig::learned(1),
            codec_train: CodecTrainConfig::default(),
            diffusion: FinetuneConfig::default(),
            augment: AugmentSection::default(),
            classifier: ClassifierSection::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::storage(path, e))
    }

    /// First 12 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    /// Checks every section and the couplings between them.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.embedder.build()?;
        self.mixer.validate()?;
        self.schedule.build()?;
        self.guidance.validate()?;
        self.denoiser.validate()?;
        self.codec.validate()?;
        self.diffusion.validate()?;
        self.classifier.model.validate()?;
        self.classifier.strategies()?;
        if self.classifier.seeds.is_empty() {
            return Err(Error::Config("classifier.seeds must not be empty".into()));
        }
        if !(self.augment.ratio > 0.0 && self.augment.ratio.is_finite()) {
            return Err(Error::Config(format!("augment.ratio must be positive, got {}", self.augment.ratio)));
        }
        if (self.embedder.m, self.embedder.d) != (self.denoiser.text_m, self.denoiser.text_d) {
            return Err(Error::Config(format!(
                "embedder is {}x{} but denoiser.text_m/text_d are {}x{}",
                self.embedder.m, self.embedder.d, self.denoiser.text_m, self.denoiser.text_d
            )));
        }
        if self.codec.latent_channels != self.denoiser.latent_channels {
            return Err(Error::Config(format!(
                "codec produces {} latent channels but the denoiser expects {}",
                self.codec.latent_channels, self.denoiser.latent_channels
            )));
        }
        Ok(())
    }

    /// The mixer config with its seed tied to the run seed, so that changing
    /// `seed` alone changes every random choice.
    pub fn run_mixer(&self) -> MixerConfig {
        MixerConfig {
            seed: crate::rng::derive_index(crate::rng::derive(self.seed, "mixer"), self.mixer.seed),
            ..self.mixer
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            ratio: self.augment.ratio,
            guidance: self.guidance,
            mixer: self.run_mixer(),
            seed: crate::rng::derive(self.seed, "augment"),
        }
    }
}

/// Applies a `section.key=value` override to a TOML document. The value is
/// parsed as TOML, falling back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Loads `path` (or the defaults), applies the overrides in order and validates.
pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::storage(p, e))?,
        None => String::new(),
    };
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let config: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
