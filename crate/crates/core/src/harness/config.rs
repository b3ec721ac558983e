use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{policy_from_name, AugmentProfile, AugmentationPolicy};
use crate::error::{ensure, Error, Result};
use crate::maml::MamlConfig;
use crate::protonet::{EvalNorm, Metric, ProtoNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Omniglot,
    MiniImagenet,
    Synthetic,
}

impl DatasetKind {
    /// Hyperparameter column used for augmentation. Synthetic glyphs are
    /// grayscale like Omniglot and share its settings.
    pub fn augment_profile(self) -> AugmentProfile {
        match self {
            DatasetKind::MiniImagenet => AugmentProfile::MiniImagenet,
            DatasetKind::Omniglot | DatasetKind::Synthetic => AugmentProfile::Omniglot,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Omniglot => "omniglot",
            DatasetKind::MiniImagenet => "miniimagenet",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "omniglot" => Ok(DatasetKind::Omniglot),
            "miniimagenet" | "mini-imagenet" => Ok(DatasetKind::MiniImagenet),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::parse("dataset", format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Maml,
    Protonet,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Maml => "maml",
            LearnerKind::Protonet => "protonet",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maml" => Ok(LearnerKind::Maml),
            "protonet" => Ok(LearnerKind::Protonet),
            other => Err(Error::parse("learner", format!("unknown learner '{other}'"))),
        }
    }
}

/// How meta-training episodes are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainEpisodes {
    /// Random labels on the unlabeled pool, targets by augmentation.
    #[default]
    Aal,
    /// Real labels from the meta-train split.
    Supervised,
}

/// Everything that determines a run, given the data root.
///
/// Serialized as a flat TOML table; absent keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub learner: LearnerKind,
    pub n_way: usize,
    pub k_shot: usize,
    /// Target instances per class in validation and test episodes.
    pub target_per_class: usize,
    /// Augmented copies of each support image in training episodes.
    pub target_multiplicity: usize,
    pub augment: String,
    pub train_episodes: TrainEpisodes,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub meta_batch: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub data_root: Option<PathBuf>,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub eval_seeds: usize,
    /// Convolution blocks in the backbone.
    pub blocks: usize,
    /// Convolution filters per block.
    pub filters: usize,

    pub metric: Metric,
    pub lr: f64,
    pub momentum: f64,
    pub eval_norm: EvalNorm,

    pub inner_steps: usize,
    pub eval_inner_steps: Option<usize>,
    pub second_order: bool,
    pub msl: bool,
    pub msl_anneal_epochs: usize,
    pub meta_lr: f64,
    pub alpha_init: f64,
    pub learn_alpha: bool,
    pub bnrs: bool,
    pub bnwb: bool,
    pub maml_eval_norm: EvalNorm,

    pub synthetic_train_classes: usize,
    pub synthetic_val_classes: usize,
    pub synthetic_test_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_side: usize,
    pub synthetic_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let proto = ProtoNetConfig::default();
        let maml = MamlConfig::default();
        Self {
            dataset: DatasetKind::Omniglot,
            learner: LearnerKind::Protonet,
            n_way: 5,
            k_shot: 1,
            target_per_class: 15,
            target_multiplicity: 1,
            augment: "CHV".into(),
            train_episodes: TrainEpisodes::Aal,
            epochs: 50,
            episodes_per_epoch: 200,
            meta_batch: 1,
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_root: None,
            val_episodes: 200,
            test_episodes: 600,
            eval_seeds: 3,
            blocks: 4,
            filters: 64,
            metric: proto.metric,
            lr: proto.lr,
            momentum: proto.momentum,
            eval_norm: proto.eval_norm,
            inner_steps: maml.inner_steps,
            eval_inner_steps: None,
            second_order: maml.second_order,
            msl: maml.msl,
            msl_anneal_epochs: maml.msl_anneal_epochs,
            meta_lr: maml.meta_lr,
            alpha_init: maml.alpha_init,
            learn_alpha: maml.learn_alpha,
            bnrs: maml.bnrs,
            bnwb: maml.bnwb,
            maml_eval_norm: maml.eval_norm,
            synthetic_train_classes: 40,
            synthetic_val_classes: 20,
            synthetic_test_classes: 20,
            synthetic_per_class: 20,
            synthetic_side: 28,
            synthetic_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("experiment config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn policy(&self) -> Result<AugmentationPolicy> {
        policy_from_name(&self.augment, self.dataset.augment_profile())
    }

    pub fn protonet_config(&self) -> ProtoNetConfig {
        ProtoNetConfig { metric: self.metric, lr: self.lr, momentum: self.momentum, eval_norm: self.eval_norm }
    }

    pub fn maml_config(&self) -> MamlConfig {
        MamlConfig {
            inner_steps: self.inner_steps,
            eval_inner_steps: self.eval_inner_steps.unwrap_or(self.inner_steps),
            second_order: self.second_order,
            msl: self.msl,
            msl_weights: None,
            msl_anneal_epochs: self.msl_anneal_epochs,
            meta_lr: self.meta_lr,
            alpha_init: self.alpha_init,
            learn_alpha: self.learn_alpha,
            bnrs: self.bnrs,
            bnwb: self.bnwb,
            eval_norm: self.maml_eval_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("target_per_class", self.target_per_class),
            ("target_multiplicity", self.target_multiplicity),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("meta_batch", self.meta_batch),
            ("val_episodes", self.val_episodes),
            ("test_episodes", self.test_episodes),
            ("eval_seeds", self.eval_seeds),
            ("blocks", self.blocks),
            ("filters", self.filters),
        ];
        for (name, v) in positive {
            ensure(v > 0, || format!("{name} must be positive"))?;
        }
        ensure(self.n_way >= 2, || "n_way must be at least 2".into())?;
        let policy = self.policy()?;
        let (side, channels) = self.image_geometry();
        policy.validate(side, channels)?;
        if self.train_episodes == TrainEpisodes::Aal && !policy.has_chv_base() {
            log::warn!("policy {} lacks the shared crop/flip base (CHV)", policy.name());
        }
        if self.dataset == DatasetKind::Synthetic {
            let s = [
                self.synthetic_train_classes,
                self.synthetic_val_classes,
                self.synthetic_test_classes,
                self.synthetic_per_class,
                self.synthetic_side,
            ];
            ensure(s.iter().all(|&v| v > 0), || "synthetic dataset sizes must be positive".into())?;
        }
        if self.learner == LearnerKind::Maml {
            self.maml_config().validate()?;
        }
        Ok(())
    }

    /// Input side and channels for the configured dataset.
    pub fn image_geometry(&self) -> (usize, usize) {
        match self.dataset {
            DatasetKind::Omniglot => (28, 1),
            DatasetKind::MiniImagenet => (84, 3),
            DatasetKind::Synthetic => (self.synthetic_side, 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = ExperimentConfig { learner: LearnerKind::Maml, augment: "CHVW".into(), ..Default::default() };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml_str("dataset = \"synthetic\"\nn_way = 3\n").unwrap();
        assert_eq!(partial.dataset, DatasetKind::Synthetic);
        assert_eq!(partial.k_shot, 1);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(ExperimentConfig { k_shot: 0, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { augment: "CHVG".into(), ..Default::default() }.validate().is_err());
        let mini = ExperimentConfig { dataset: DatasetKind::MiniImagenet, augment: "CHVG".into(), ..Default::default() };
        mini.validate().unwrap();
    }
}
