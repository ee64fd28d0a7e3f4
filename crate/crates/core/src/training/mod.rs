//! Supervised training on partially labeled cases, pseudo-label generation,
//! mixed fine-tuning and sliding-window inference.

mod augment;
mod infer;
mod optim;
mod sampling;
mod trainer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, RigidTransform};
pub use infer::{
    generate_pseudo_labels, infer_case, sliding_window, sliding_window_infer, window_starts, PSEUDO_DIR,
};
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use sampling::{extract, sample_patch, Patch};
pub use trainer::{finetune_mixed, load_pool, prepare_case, train, CasePool, StepRecord, Trainer, TrainingCase};

use crate::lossmetrics::MetricError;
use crate::model::{ModelConfig, ModelError};
use crate::phantom::PhantomError;
use crate::postprocess::Connectivity;
use crate::preprocess::PreprocessError;
use crate::tensor::TensorError;
use crate::volumeio::{Dims, Spacing, Split, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no cases in split(s) {0:?}")]
    EmptySplit(Vec<Split>),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("optimizer state mismatch: {0}")]
    Optimizer(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: Dims,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub steps: u64,
    pub pos_sample_prob: f64,
    /// Maximum rotation per axis in degrees.
    pub rotation_degrees: f64,
    /// Maximum integer translation per axis in voxels.
    pub translation_voxels: usize,
    /// Save a numbered checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    /// Spacing cases are resampled to before training (none: keep).
    pub target_spacing: Option<Spacing>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: [32; 3],
            batch_size: 2,
            lr: 1e-4,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            steps: 500,
            pos_sample_prob: 0.5,
            rotation_degrees: 15.0,
            translation_voxels: 4,
            checkpoint_every: 0,
            target_spacing: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        let f = model.downsample_factor();
        if self.patch_size.iter().any(|&p| p == 0 || p % f != 0) {
            return err(format!(
                "patch size {:?} must be a positive multiple of the downsampling factor {f}",
                self.patch_size
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return err(format!("weight_decay {} must be in [0, 1/lr)", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return err(format!("betas {:?} must be in [0, 1)", self.betas));
        }
        if !(self.adam_eps > 0.0) {
            return err(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(0.0..=1.0).contains(&self.pos_sample_prob) {
            return err(format!("pos_sample_prob {} must be in [0, 1]", self.pos_sample_prob));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return err(format!("rotation_degrees {} must be in [0, 180]", self.rotation_degrees));
        }
        if let Some(s) = self.target_spacing {
            if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return err(format!("target_spacing {s:?} must be positive"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub patch_size: Dims,
    /// Fraction of the patch shared by neighbouring windows, in `[0, 1)`.
    pub overlap: f64,
    /// Keep only the largest component per class.
    pub postprocess: bool,
    pub connectivity: Connectivity,
    /// Components smaller than this are dropped during post-processing.
    pub min_component_size: usize,
    /// Spacing the model was trained at (none: use the image spacing).
    pub target_spacing: Option<Spacing>,
    /// Pseudo-labels only: voxels whose winning probability is below this
    /// become background.
    pub min_confidence: Option<f64>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            patch_size: [32; 3],
            overlap: 0.5,
            postprocess: true,
            connectivity: Connectivity::TwentySix,
            min_component_size: 0,
            target_spacing: None,
            min_confidence: None,
        }
    }
}

impl InferConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let f = model.downsample_factor();
        if self.patch_size.iter().any(|&p| p == 0 || p % f != 0) {
            return Err(TrainError::Config(format!(
                "patch size {:?} must be a positive multiple of the downsampling factor {f}",
                self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(TrainError::Config(format!("overlap {} must be in [0, 1)", self.overlap)));
        }
        if let Some(c) = self.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(TrainError::Config(format!("min_confidence {c} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Fixed layout of a training run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}.mckp"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.mckp")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs.jsonl")
    }

    pub fn preds(&self) -> PathBuf {
        self.root.join("preds")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.preds()] {
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(())
    }
}
