//! Run configuration: a versioned TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use odfield::field_model::ModelConfig;
use odfield::training::TrainConfig;
use odfield::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Named model and training protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 14 levels, base 6, 2^20 tables, 2 features, sine head 2×64.
    HashencDefault,
    /// 4 levels, base 80, scale 1.13, 8 features, sine head 3×128.
    HashencOptimized,
    /// Global sine network 10×1024, learning rate 1e-6.
    SirenBaseline,
}

impl Profile {
    pub fn model(self, finest_extent: usize) -> ModelConfig {
        match self {
            Profile::HashencDefault => ModelConfig::hashenc_default(finest_extent),
            Profile::HashencOptimized => ModelConfig::hashenc_optimized(),
            Profile::SirenBaseline => ModelConfig::siren_baseline(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::SirenBaseline => TrainConfig::siren_baseline(),
            _ => TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub nu: f64,
    pub kappa: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { nu: 1.0, kappa: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dwi: Option<PathBuf>,
    pub bvec: Option<PathBuf>,
    pub bval: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Whether and how to pick `λ_c` before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Selection {
    pub enabled: bool,
    pub candidates: Vec<f64>,
    /// Axis of the slice used for selection (0, 1, 2); the central slice is taken.
    pub slice_axis: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Selection {
    fn default() -> Self {
        Self {
            enabled: false,
            candidates: odfield::training::LAMBDA_C_CANDIDATES.to_vec(),
            slice_axis: 2,
            epochs: 300,
            batch_size: 256,
        }
    }
}

/// File-level schema. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub version: u32,
    pub profile: Profile,
    pub seed: u64,
    /// Replaces the profile's architecture when present.
    pub model: Option<ModelConfig>,
    /// Overrides for the profile's training protocol.
    pub train: Option<toml::Table>,
    pub prior: PriorConfig,
    pub selection: Selection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            profile: Profile::HashencDefault,
            seed: 0,
            model: None,
            train: None,
            prior: PriorConfig::default(),
            selection: Selection::default(),
            paths: Paths::default(),
        }
    }
}

/// Everything a training run needs, after merging file, profile and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prior: PriorConfig,
    pub selection: Selection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Partial {
            version: Option<u32>,
            profile: Option<Profile>,
            seed: Option<u64>,
            model: Option<ModelConfig>,
            train: Option<toml::Table>,
            prior: Option<PriorConfig>,
            selection: Option<Selection>,
            paths: Option<Paths>,
        }
        let p: Partial = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let version = p.version.unwrap_or(SCHEMA_VERSION);
        if version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {version} is not supported (expected {SCHEMA_VERSION})"
            )));
        }
        let cfg = Self {
            version,
            profile: p.profile.unwrap_or(Profile::HashencDefault),
            seed: p.seed.unwrap_or(0),
            model: p.model,
            train: p.train,
            prior: p.prior.unwrap_or_default(),
            selection: p.selection.unwrap_or_default(),
            paths: p.paths.unwrap_or_default(),
        };
        // surface unknown training keys now rather than at resolve time
        cfg.train_config()?;
        Ok(cfg)
    }

    /// The profile's protocol with the file's `[train]` overrides applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut base = toml::Table::try_from(self.profile.train()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(over) = &self.train {
            for (k, v) in over {
                base.insert(k.clone(), v.clone());
            }
        }
        let mut cfg: TrainConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {e}")))?;
        if self.train.as_ref().is_none_or(|t| !t.contains_key("seed")) {
            cfg.seed = self.seed;
        }
        Ok(cfg)
    }

    pub fn resolve(&self, finest_extent: usize) -> Result<ResolvedConfig> {
        let model = self.model.clone().unwrap_or_else(|| self.profile.model(finest_extent));
        model.validate()?;
        let train = self.train_config()?;
        train.validate()?;
        Ok(ResolvedConfig {
            version: self.version,
            profile: self.profile,
            seed: self.seed,
            model,
            train,
            prior: self.prior.clone(),
            selection: self.selection.clone(),
            paths: self.paths.clone(),
        })
    }
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
