//! Experiment configuration. Defaults reproduce the XOR-AND-XOR setup.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::DatasetParams;
use crate::error::{Result, SharcsError};
use crate::training::{LossConfig, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Local concepts per modality (k).
    pub local_width: usize,
    /// Shared concepts per modality (t).
    pub shared_width: usize,
    pub tabular_hidden: usize,
    pub graph_hidden: usize,
    pub graph_layers: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub local_predictor_hidden: usize,
    pub classes: usize,
    /// Gumbel softmax temperature.
    pub tau: f64,
    pub leaky_slope: f64,
    pub rescale_momentum: f64,
    pub rescale_epsilon: f64,
    /// Build the per-modality heads `f_i`.
    pub local_predictors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            local_width: 7,
            shared_width: 8,
            tabular_hidden: 30,
            graph_hidden: 30,
            graph_layers: 5,
            projector_hidden: 8,
            predictor_hidden: 10,
            local_predictor_hidden: 10,
            classes: 2,
            tau: 1.0,
            leaky_slope: 0.01,
            rescale_momentum: 0.1,
            rescale_epsilon: 1e-5,
            local_predictors: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SharcsError::InvalidConfiguration(m.to_string()));
        if [
            self.local_width,
            self.shared_width,
            self.tabular_hidden,
            self.graph_hidden,
            self.projector_hidden,
            self.predictor_hidden,
            self.local_predictor_hidden,
        ]
        .contains(&0)
        {
            return bad("layer widths must be positive");
        }
        if self.graph_layers < 2 {
            return bad("graph backbone needs at least two layers");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if !(self.tau > 0.0) {
            return bad("gumbel temperature must be positive");
        }
        if !(self.rescale_epsilon > 0.0) || !(0.0..=1.0).contains(&self.rescale_momentum) {
            return bad("rescale epsilon must be positive and momentum in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub anchor_count: usize,
    /// Epochs of the relative-representation head after its encoders.
    pub relative_head_epochs: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            anchor_count: 50,
            relative_head_epochs: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetParams,
    pub split_ratio: f64,
    /// Permit training on local XOR labels (off for XOR-AND-XOR).
    pub local_supervision: bool,
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub loss: LossConfig,
    pub baselines: BaselineParams,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            split_ratio: 0.8,
            local_supervision: false,
            model: ModelConfig::default(),
            train: TrainPlan::default(),
            loss: LossConfig::default(),
            baselines: BaselineParams::default(),
            output_dir: "runs".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SharcsError::InvalidConfiguration(m));
        if self.dataset.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split ratio {} not in (0, 1)", self.split_ratio));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate(crate::datamodel::Modality::ALL.len())?;
        if self.loss.betas.iter().any(|&b| b > 0.0) && !self.local_supervision {
            return bad("local loss weights need local supervision".into());
        }
        if self.baselines.anchor_count == 0 || self.baselines.relative_head_epochs == 0 {
            return bad("anchor count and relative head epochs must be positive".into());
        }
        Ok(())
    }

    /// Stable hash of the dataset-defining fields, used to pair checkpoints
    /// with datasets.
    pub fn dataset_fingerprint(&self) -> String {
        fingerprint(&(self.dataset, self.split_ratio))
    }

    /// Hash of everything that shapes a run; the output directory is left out.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir.clear();
        fingerprint(&cfg)
    }
}

pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
