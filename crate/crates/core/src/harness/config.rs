use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::DEFAULT_BAND_WIDTH;
use crate::error::{Error, Result};
use crate::mape::{EmbeddingVariant, MapeConfig};
use crate::nn::{ModelConfig, TrainConfig};
use crate::synth::SynthParams;

/// Synthetic dataset settings used by the `synth` command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 50,
            size: 64,
            seed: 0,
            params: SynthParams::default(),
        }
    }
}

/// Mask degradation settings for the BER sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub targets: Vec<f64>,
    pub band_width: usize,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            targets: vec![0.0, 1.0, 2.0, 4.0],
            band_width: DEFAULT_BAND_WIDTH,
            seed: 0,
        }
    }
}

/// Everything a run needs. Stored as TOML and copied into the output
/// directory with the crate version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: EmbeddingVariant,
    /// Root of the triplet dataset.
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// `[height, width]` the test split is resampled to; native when unset.
    pub eval_resolution: Option<[usize; 2]>,
    /// `[height, width]` the train split is resampled to; native when unset.
    pub train_resolution: Option<[usize; 2]>,
    /// Write predicted images next to the metrics.
    pub save_predictions: bool,
    pub model: ModelConfig,
    pub mape: MapeConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub degrade: DegradeConfig,
}

impl Default for RunConfig {
    /// The desk-scale profile: 64×64 synthetic triplets, two blocks, 30
    /// epochs. The short schedule uses a larger base learning rate than
    /// [`TrainConfig::default`].
    fn default() -> Self {
        Self {
            variant: EmbeddingVariant::Mape,
            dataset: PathBuf::from("data/synthetic"),
            out: PathBuf::from("runs/default"),
            eval_resolution: None,
            train_resolution: None,
            save_predictions: true,
            model: ModelConfig::default(),
            mape: MapeConfig::default(),
            train: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            synth: SynthConfig::default(),
            degrade: DegradeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mape.validate()?;
        self.train.validate()?;
        self.synth.params.validate()?;
        if self.model.patch_size != self.mape.patch_size || self.model.embed_dim != self.mape.embed_dim {
            return Err(Error::Config(format!(
                "model (patch {}, dim {}) and mape (patch {}, dim {}) disagree",
                self.model.patch_size, self.model.embed_dim, self.mape.patch_size, self.mape.embed_dim
            )));
        }
        if self.variant != EmbeddingVariant::PlainPe && !self.mape.emphasizes_shadow() {
            return Err(Error::Config(format!(
                "mask-augmented runs need w1 > w2, got w1={} w2={}",
                self.mape.w1, self.mape.w2
            )));
        }
        for res in [self.eval_resolution, self.train_resolution].into_iter().flatten() {
            self.mape.check_dims(res[0], res[1])?;
        }
        if let Some(t) = self.degrade.targets.iter().find(|t| !(0.0..100.0).contains(*t)) {
            return Err(Error::Config(format!("BER target {t} outside [0, 100)")));
        }
        Ok(())
    }

    /// The same config pointed at `out/<variant>` with another variant.
    pub fn for_variant(&self, variant: EmbeddingVariant) -> RunConfig {
        RunConfig {
            variant,
            out: self.out.join(variant.as_str()),
            ..self.clone()
        }
    }
}
