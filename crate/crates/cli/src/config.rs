//! JSON experiment configuration with defaults, validation and hashing.

use std::path::{Path, PathBuf};

use ntk_core::attacks::AttackKind;
use ntk_core::datasets::Normalization;
use ntk_core::nets::{Batching, TrainMode};
use ntk_core::{AttackConfig, KernelModel, Loss, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Gram,
    Transfer,
    Attack,
    Features,
    Filter,
    Dynamics,
    LinAdv,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Gram => "gram",
            Experiment::Transfer => "transfer",
            Experiment::Attack => "attack",
            Experiment::Features => "features",
            Experiment::Filter => "filter",
            Experiment::Dynamics => "dynamics",
            Experiment::LinAdv => "lin-adv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeSpec {
    None,
    UnitNorm,
    PixelScale,
}

impl From<NormalizeSpec> for Normalization {
    fn from(n: NormalizeSpec) -> Self {
        match n {
            NormalizeSpec::None => Normalization::None,
            NormalizeSpec::UnitNorm => Normalization::UnitNorm,
            NormalizeSpec::PixelScale => Normalization::PixelScale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    /// IDX image and label files (relative paths resolve against the config file).
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub limit: usize,
    pub class_filter: Option<Vec<usize>>,
    pub normalize: NormalizeSpec,
    pub train_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            n: 200,
            dim: 16,
            classes: 2,
            separation: 8.0,
            images: None,
            labels: None,
            limit: 1000,
            class_filter: None,
            normalize: NormalizeSpec::UnitNorm,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    TwoLayer,
    FullyConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub depth: usize,
    pub jitter_scale: f64,
    /// Learning rate `η` of the gradient-flow predictor.
    pub learning_rate: f64,
    /// Prediction horizon; `null` means converged (`t = ∞`).
    pub time: Option<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::TwoLayer,
            depth: 1,
            jitter_scale: ntk_core::ntk::DEFAULT_JITTER_SCALE,
            learning_rate: 1e-2,
            time: None,
        }
    }
}

impl KernelSpec {
    pub fn model(&self) -> KernelModel {
        match self.family {
            KernelFamily::TwoLayer => KernelModel::TwoLayerFrozenRelu,
            KernelFamily::FullyConnected => KernelModel::FullyConnectedRelu { depth: self.depth },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackName {
    Fgsm,
    Pgd,
    TaylorBinary,
    TaylorMaxL1,
    TaylorSumDz,
}

impl AttackName {
    pub fn kind(self) -> AttackKind {
        match self {
            AttackName::Fgsm | AttackName::Pgd => AttackKind::Gradient,
            AttackName::TaylorBinary => AttackKind::TaylorBinary,
            AttackName::TaylorMaxL1 => AttackKind::TaylorMaxL1,
            AttackName::TaylorSumDz => AttackKind::TaylorSumDz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackName,
    /// `null` picks a data-dependent default.
    pub epsilon: Option<f64>,
    pub steps: usize,
    /// `null` means `2.5 ε / steps`.
    pub step_size: Option<f64>,
    pub clamp: Option<[f64; 2]>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackName::Fgsm,
            epsilon: None,
            steps: 10,
            step_size: None,
            clamp: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    Standard,
    AdvFgsm,
    AdvPgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    Squared,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    pub mode: ModeSpec,
    /// `null` for full-batch descent.
    pub batch_size: Option<usize>,
    pub loss: LossSpec,
    /// Hidden widths of the trainable perceptron used by dynamics experiments.
    pub hidden: Vec<usize>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 100,
            mode: ModeSpec::Standard,
            batch_size: None,
            loss: LossSpec::Squared,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    pub widths: Vec<usize>,
    /// Epochs at which cosine similarity and robust accuracies are logged.
    pub log_epochs: Vec<usize>,
    /// Kernel time per training epoch.
    pub epoch_to_time: f64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            widths: vec![1000, 10000],
            log_epochs: vec![10, 20, 40, 60, 80, 100],
            epoch_to_time: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSpec {
    /// Number of leading features scored; `null` scores all of them.
    pub top: Option<usize>,
    /// Gradient images are written for this many leading features.
    pub images: usize,
    /// Validation example the gradient images are taken at.
    pub image_example: usize,
    /// Filter sweep sizes; empty means every `r` in `1..=n`.
    pub filter_sizes: Vec<usize>,
}

impl Default for FeaturesSpec {
    fn default() -> Self {
        Self {
            top: None,
            images: 10,
            image_example: 0,
            filter_sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackedSpec {
    Clean,
    Attacked,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSpec {
    pub tracked_batch: usize,
    /// Checkpoint epochs; empty means every epoch.
    pub checkpoints: Vec<usize>,
    pub cutoffs: Vec<usize>,
    pub tracked: TrackedSpec,
    /// Top-space cutoff for the additional polar trajectory.
    pub top_space: usize,
    /// Epoch at which the linearised-training experiment freezes the Jacobian.
    pub linearize_at: usize,
}

impl Default for DynamicsSpec {
    fn default() -> Self {
        Self {
            tracked_batch: 64,
            checkpoints: Vec::new(),
            cutoffs: vec![10, 20],
            tracked: TrackedSpec::Clean,
            top_space: 20,
            linearize_at: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub kernel: KernelSpec,
    pub attack: AttackSpec,
    pub train: TrainSpec,
    pub transfer: TransferSpec,
    pub features: FeaturesSpec,
    pub dynamics: DynamicsSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            out: None,
            dataset: DatasetSpec::default(),
            kernel: KernelSpec::default(),
            attack: AttackSpec::default(),
            train: TrainSpec::default(),
            transfer: TransferSpec::default(),
            features: FeaturesSpec::default(),
            dynamics: DynamicsSpec::default(),
        }
    }
}

fn field(path: &str, msg: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            RunError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Reads a config file; relative IDX paths are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.dataset.images, &mut cfg.dataset.labels].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Blobs => {
                if d.classes < 2 {
                    return Err(field("dataset.classes", "must be >= 2"));
                }
                if d.n < d.classes {
                    return Err(field("dataset.n", "must be >= dataset.classes"));
                }
                if d.dim < d.classes {
                    return Err(field("dataset.dim", "must be >= dataset.classes"));
                }
                if !(d.separation > 0.0) {
                    return Err(field("dataset.separation", "must be positive"));
                }
            }
            DatasetKind::Idx => {
                if d.images.is_none() {
                    return Err(field("dataset.images", "required for idx datasets"));
                }
                if d.labels.is_none() {
                    return Err(field("dataset.labels", "required for idx datasets"));
                }
            }
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(field("dataset.train_fraction", "must lie in (0, 1)"));
        }
        let k = &self.kernel;
        if k.family == KernelFamily::FullyConnected && k.depth == 0 {
            return Err(field("kernel.depth", "must be >= 1"));
        }
        if !(k.jitter_scale >= 0.0) {
            return Err(field("kernel.jitter_scale", "must be >= 0"));
        }
        if !(k.learning_rate > 0.0) {
            return Err(field("kernel.learning_rate", "must be positive"));
        }
        if let Some(t) = k.time {
            if !(t >= 0.0) {
                return Err(field("kernel.time", "must be >= 0"));
            }
        }
        let a = &self.attack;
        if let Some(e) = a.epsilon {
            if !(e >= 0.0) {
                return Err(field("attack.epsilon", "must be >= 0"));
            }
        }
        if a.steps == 0 {
            return Err(field("attack.steps", "must be >= 1"));
        }
        if let Some(s) = a.step_size {
            if !(s > 0.0) {
                return Err(field("attack.step_size", "must be positive"));
            }
        }
        if let Some([lo, hi]) = a.clamp {
            if !(lo < hi) {
                return Err(field("attack.clamp", "must satisfy lo < hi"));
            }
        }
        let t = &self.train;
        if !(t.learning_rate >= 0.0) {
            return Err(field("train.learning_rate", "must be >= 0"));
        }
        if t.batch_size == Some(0) {
            return Err(field("train.batch_size", "must be >= 1"));
        }
        if t.hidden.contains(&0) {
            return Err(field("train.hidden", "widths must be >= 1"));
        }
        if self.transfer.widths.is_empty() || self.transfer.widths.contains(&0) {
            return Err(field("transfer.widths", "must be nonempty positive widths"));
        }
        if !(self.transfer.epoch_to_time > 0.0) {
            return Err(field("transfer.epoch_to_time", "must be positive"));
        }
        if self.dynamics.tracked_batch == 0 {
            return Err(field("dynamics.tracked_batch", "must be >= 1"));
        }
        if self.dynamics.cutoffs.contains(&0) {
            return Err(field("dynamics.cutoffs", "must be >= 1"));
        }
        if self.dynamics.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(field("dynamics.checkpoints", "must be strictly increasing"));
        }
        Ok(())
    }

    /// `ε` from the config, or the default for the data: 0.3 for pixel data,
    /// `0.1 · separation` for raw blobs, and the same fraction of the typical
    /// row norm `sqrt(separation² + d)` for unit-normalised blobs.
    pub fn epsilon(&self) -> f64 {
        if let Some(e) = self.attack.epsilon {
            return e;
        }
        let d = &self.dataset;
        match (d.kind, d.normalize) {
            (DatasetKind::Idx, _) | (_, NormalizeSpec::PixelScale) => 0.3,
            (DatasetKind::Blobs, NormalizeSpec::None) => 0.1 * d.separation,
            (DatasetKind::Blobs, NormalizeSpec::UnitNorm) => {
                0.1 * d.separation / (d.separation * d.separation + d.dim as f64).sqrt()
            }
        }
    }

    pub fn attack_config(&self) -> AttackConfig<f64> {
        let eps = self.epsilon();
        let mut cfg = match self.attack.kind {
            AttackName::Pgd => {
                let steps = self.attack.steps;
                let alpha = self.attack.step_size.unwrap_or(2.5 * eps / steps as f64);
                AttackConfig::iterative(eps, steps, alpha)
            }
            _ => AttackConfig::one_step(eps),
        };
        cfg.clamp_box = self.attack.clamp.map(|[lo, hi]| (lo, hi));
        cfg
    }

    /// The attack of the config forced to one step.
    pub fn fgsm_config(&self) -> AttackConfig<f64> {
        AttackConfig {
            steps: 1,
            step_size: self.epsilon(),
            ..self.attack_config()
        }
    }

    /// The attack of the config as an iterative attack.
    pub fn pgd_config(&self) -> AttackConfig<f64> {
        let eps = self.epsilon();
        let steps = self.attack.steps;
        AttackConfig {
            steps,
            step_size: self.attack.step_size.unwrap_or(2.5 * eps / steps as f64),
            ..self.attack_config()
        }
    }

    pub fn train_config(&self, mode: ModeSpec, epochs: usize, seed: u64) -> TrainConfig<f64> {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs,
            mode: match mode {
                ModeSpec::Standard => TrainMode::Standard,
                ModeSpec::AdvFgsm => TrainMode::AdvFgsm,
                ModeSpec::AdvPgd => TrainMode::AdvPgd,
            },
            attack: match mode {
                ModeSpec::Standard => None,
                ModeSpec::AdvFgsm => Some(self.fgsm_config()),
                ModeSpec::AdvPgd => Some(self.pgd_config()),
            },
            batch: t.batch_size.map_or(Batching::FullBatch, Batching::Minibatch),
            seed,
            loss: match t.loss {
                LossSpec::Squared => Loss::SquaredError,
                LossSpec::CrossEntropy => Loss::CrossEntropy,
            },
            checkpoint_epochs: Vec::new(),
            robust_eval: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn invalid_enum_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"attack": {"kind": "bogus"}}"#).unwrap_err();
        assert!(err.to_string().contains("attack.kind"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = ExperimentConfig::from_json(r#"{"kernel": {"dept": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("kernel"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.dataset.train_fraction = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("dataset.train_fraction"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn epsilon_defaults() {
        let mut c = ExperimentConfig::default();
        c.dataset.normalize = NormalizeSpec::None;
        assert!((c.epsilon() - 0.8).abs() < 1e-15);
        c.dataset.kind = DatasetKind::Idx;
        assert_eq!(c.epsilon(), 0.3);
        c.attack.epsilon = Some(0.05);
        assert_eq!(c.epsilon(), 0.05);
    }
}
