//! Joint training of the rhythm, style and flow modules, checkpointing, the
//! synthesis pipeline, and the baseline-vs-full experiment runner.

mod ckpt;
mod dataset;
mod experiment;
mod synth;
mod trainer;

pub use ckpt::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint, SpeakerMeta};
pub use dataset::{prepare_records, PreparedUtt};
pub use experiment::{
    run_experiment, CellStats, CorpusSource, ExperimentConfig, ExperimentResult, VariantSpec,
};
pub use synth::{synthesize, StyleSource};
pub use trainer::{train, train_group, DarsModel, GroupTrainOutcome, StepLosses};

use serde::{Deserialize, Serialize};

use crate::corpus::Severity;
use crate::cpo::CpoConfig;
use crate::error::{Error, Result};
use crate::flow::{DecoderConfig, OtCfmConfig};
use crate::nn::EncoderConfig;
use crate::style::StyleConfig;

/// Which mechanisms are active; the ablation axis of the experiment table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct AblationFlags {
    pub rhythm: bool,
    pub cpo: bool,
    pub style: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            rhythm: true,
            cpo: true,
            style: true,
        }
    }
}

impl AblationFlags {
    /// Duration + flow matching only.
    pub fn baseline() -> Self {
        AblationFlags {
            rhythm: false,
            cpo: false,
            style: false,
        }
    }

    pub fn rhythm_only() -> Self {
        AblationFlags {
            rhythm: true,
            cpo: false,
            style: false,
        }
    }

    pub fn rhythm_cpo() -> Self {
        AblationFlags {
            rhythm: true,
            cpo: true,
            style: false,
        }
    }

    pub fn full() -> Self {
        AblationFlags::default()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub lambda_cp: f64,
    pub lambda_cfm: f64,
    pub lambda_prior: f64,
    pub lambda_vq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_d: 1.0,
            lambda_cp: 1.0,
            lambda_cfm: 1.0,
            lambda_prior: 1.0,
            lambda_vq: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PauseConfig {
    pub classes: usize,
    pub thresholds_s: Vec<f64>,
}

impl Default for PauseConfig {
    fn default() -> Self {
        PauseConfig {
            classes: 4,
            thresholds_s: vec![0.15, 0.40],
        }
    }
}

impl PauseConfig {
    pub fn to_label_config<F: crate::scalar::Scalar>(
        &self,
    ) -> crate::alignment::PauseLabelConfig<F> {
        crate::alignment::PauseLabelConfig {
            k: self.classes,
            thresholds_s: self.thresholds_s.iter().map(|&t| crate::scalar::fl(t)).collect(),
        }
    }
}

/// Network sizes; data-dependent sizes (vocabulary, mel dimension, speaker
/// count) come from the corpus at build time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub phoneme_encoder: EncoderConfig,
    pub augmented_encoder: EncoderConfig,
    pub predictor_hidden: usize,
    pub style: StyleConfig,
    pub speaker_dim: usize,
    pub fusion_hidden: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phoneme_encoder: EncoderConfig {
                dim: 64,
                layers: 2,
                heads: 4,
                ffn: 128,
            },
            augmented_encoder: EncoderConfig {
                dim: 128,
                layers: 4,
                heads: 4,
                ffn: 256,
            },
            predictor_hidden: 64,
            style: StyleConfig::default(),
            speaker_dim: 16,
            fusion_hidden: 128,
            decoder: DecoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Steps between in-memory parameter snapshots (divergence recovery).
    pub snapshot_every: usize,
    pub losses: LossWeights,
    pub flags: AblationFlags,
    pub cpo: CpoConfig,
    /// Pause-prediction accuracy (sliding window) required before the CPO
    /// loss switches on.
    pub cpo_warmup_accuracy: f64,
    pub otcfm: OtCfmConfig,
    pub pause: PauseConfig,
    pub model: ModelConfig,
    /// Normal-duration lookup table for the CPO reference provider.
    pub normal_table: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 600,
            lr: 1e-3,
            grad_clip: 1.0,
            snapshot_every: 100,
            losses: LossWeights::default(),
            flags: AblationFlags::default(),
            cpo: CpoConfig::default(),
            cpo_warmup_accuracy: 0.6,
            otcfm: OtCfmConfig::default(),
            pause: PauseConfig::default(),
            model: ModelConfig::default(),
            normal_table: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.losses;
        if [w.lambda_s, w.lambda_d, w.lambda_cp, w.lambda_cfm, w.lambda_prior, w.lambda_vq]
            .iter()
            .all(|&l| l == 0.0)
        {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        if [w.lambda_s, w.lambda_d, w.lambda_cp, w.lambda_cfm, w.lambda_prior, w.lambda_vq]
            .iter()
            .any(|&l| l < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.flags.cpo && !self.flags.rhythm {
            return Err(Error::Config(
                "cpo requires the rhythm stage (the weights come from pause predictions)".into(),
            ));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if let Some(warn) = self.cpo.validate()? {
            eprintln!("warning: {warn}");
        }
        self.otcfm.validate()?;
        self.pause.to_label_config::<f64>().validate()?;
        Ok(())
    }
}

/// Speaker roster entry carried in checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeakerEntry {
    pub id: String,
    pub severity: Severity,
}
