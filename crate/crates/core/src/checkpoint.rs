//! Versioned JSON checkpoints.
//!
//! A checkpoint file is a single JSON object:
//!
//! ```text
//! { "version": 1,
//!   "meta": { "dataset", "policy", "n_way", "k_shot", "seed", "epoch", "val_accuracy" },
//!   "learner": { "protonet": {...} } | { "maml": {...} } }
//! ```
//!
//! Every parameter array is stored as `{ "shape": [...], "data": [...] }`
//! with shortest round-trip float formatting, so loading restores values
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maml::MamlLearner;
use crate::protonet::ProtoNetLearner;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerState {
    Protonet(ProtoNetLearner),
    Maml(MamlLearner),
}

impl LearnerState {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LearnerState::Protonet(_) => "protonet",
            LearnerState::Maml(_) => "maml",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dataset: String,
    pub policy: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
    /// Completed training epochs; 0 for the initial parameters.
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub learner: LearnerState,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, learner: LearnerState) -> Self {
        Self { version: CHECKPOINT_VERSION, meta, learner }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Validation(format!(
                "{}: checkpoint version {version:?} is not supported (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        serde_json::from_value(raw).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig, Head};
    use crate::maml::MamlConfig;
    use crate::protonet::ProtoNetConfig;
    use crate::rng::RngStream;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            dataset: "synthetic".into(),
            policy: "CHV".into(),
            n_way: 3,
            k_shot: 1,
            seed: 7,
            epoch: 0,
            val_accuracy: Some(0.123456789),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let cfg = BackboneConfig { in_channels: 1, side: 8, blocks: 2, filters: 3, head: Head::Linear(3) };
        let theta = init_backbone(cfg.clone(), &mut RngStream::new(1)).unwrap();
        let maml = MamlLearner::new(theta, MamlConfig { inner_steps: 2, eval_inner_steps: 2, ..Default::default() }).unwrap();
        let proto = ProtoNetLearner::new(
            init_backbone(BackboneConfig { head: Head::Embedding, ..cfg }, &mut RngStream::new(2)).unwrap(),
            ProtoNetConfig::default(),
        );
        let dir = tempfile::tempdir().unwrap();
        for learner in [LearnerState::Maml(maml), LearnerState::Protonet(proto)] {
            let ck = Checkpoint::new(meta(), learner);
            let path = dir.path().join("ck.json");
            ck.save(&path).unwrap();
            assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        fs::write(&path, r#"{"version": 99, "meta": {}, "learner": {}}"#).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Validation(_))));
    }
}
