//! TOML run configuration. Field names match the library structs; unknown
//! keys are rejected.

use std::path::Path;

use canopy_core::experiment::{PredictConfig, SplitSpec, Variant};
use canopy_core::model::{KernelMode, ModelConfig};
use canopy_core::raster::SceneSpec;
use canopy_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Network shape shared by every variant; input channels and kernel size
/// come from the variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub trunk_width: usize,
    pub n_blocks: usize,
    pub entry_depths: [usize; 2],
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            trunk_width: d.trunk_width,
            n_blocks: d.n_blocks,
            entry_depths: d.entry_depths,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, in_channels: usize, kernel_mode: KernelMode, seed: u64) -> ModelConfig {
        ModelConfig {
            in_channels,
            trunk_width: self.trunk_width,
            n_blocks: self.n_blocks,
            entry_depths: self.entry_depths,
            kernel_mode,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::standard_set().into_iter().map(|v| v.name).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; model initialization and patch sampling seeds derive from it.
    pub seed: u64,
    /// Band subset and kernel size for `train`, e.g. `ALL` or `ALL_1x1`.
    pub variant: String,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub predict: PredictConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: "ALL".into(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            predict: PredictConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Deterministic per-component seed.
pub fn sub_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if raw
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"))
        {
            return Err(CliError::Config(
                "train.seed is derived from the top-level seed; set `seed` instead".into(),
            ));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.variant()?;
        for v in &self.ablate.variants {
            Variant::parse(v)?;
        }
        self.model_config(&self.variant()?).validate()?;
        self.train_config().validate()?;
        if self.predict.overlap >= self.predict.tile_size {
            return Err(CliError::Config(format!(
                "predict.overlap {} must be below predict.tile_size {}",
                self.predict.overlap, self.predict.tile_size
            )));
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        Ok(Variant::parse(&self.variant)?)
    }

    pub fn model_config(&self, v: &Variant) -> ModelConfig {
        self.model
            .model_config(v.bands.bands().len(), v.kernel_mode, sub_seed(self.seed, "model"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }
}

pub fn load_scene_spec(path: Option<&Path>) -> Result<SceneSpec, CliError> {
    let spec = match path {
        None => SceneSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    spec.validate()?;
    Ok(spec)
}
