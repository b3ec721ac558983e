//! Experiment orchestration: meta-training with per-epoch validation,
//! best-model selection, final testing, policy ablation grids, and
//! result/plot emission.
//!
//! Every random draw in a run descends from `ExperimentConfig::seed` through
//! fixed labels, so a config and a data root determine all reported numbers.
//! Validation episodes are regenerated from their own per-episode seeds, so
//! each epoch is scored on the same bank without holding it in memory. Test
//! episodes come from a separate label and are only drawn in
//! [`run_final_test`].

mod config;
mod plot;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use config::{DatasetKind, ExperimentConfig, LearnerKind, TrainEpisodes};
pub use plot::{emit_plots, VAL_PLOT_FILE};
pub use report::{emit_results, mean_and_std, parse_results, render_results, EvalReport, EvalSplit, ResultFormat, RESULT_COLUMNS};

use crate::augment::policy_from_name;
use crate::backbone::{init_backbone, BackboneConfig, Head};
use crate::checkpoint::{Checkpoint, CheckpointMeta, LearnerState};
use crate::data::{load_miniimagenet, load_omniglot, strip_labels, synthetic_splits, DatasetIndex};
use crate::episode::{make_meta_batch, sample_supervised_episode, Episode, EpisodeSource, EpisodeSpec};
use crate::error::{ensure, Error, Result};
use crate::maml::{maml_evaluate, meta_update, MamlLearner};
use crate::protonet::{protonet_evaluate, protonet_meta_train_step, ProtoNetLearner};
use crate::rng::RngStream;

pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const RECORD_FILE: &str = "record.json";

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_VAL: u64 = 3;
const TAG_TEST: u64 = 4;

fn tagged_seed(seed: u64, tag: u64) -> u64 {
    RngStream::derive(seed, tag).next_u64()
}

pub struct Splits {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

/// `root/<name>` for the first existing name, else `root` itself.
fn dataset_dir(root: &Path, names: &[&str]) -> PathBuf {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir()).unwrap_or_else(|| root.to_path_buf())
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let root = || {
        cfg.data_root
            .clone()
            .ok_or_else(|| Error::Validation(format!("dataset {} needs a data root", cfg.dataset)))
    };
    let (train, val, test) = match cfg.dataset {
        DatasetKind::Omniglot => load_omniglot(&dataset_dir(&root()?, &["omniglot"]))?,
        DatasetKind::MiniImagenet => load_miniimagenet(&dataset_dir(&root()?, &["miniimagenet", "mini-imagenet"]))?,
        DatasetKind::Synthetic => synthetic_splits(
            cfg.synthetic_train_classes,
            cfg.synthetic_val_classes,
            cfg.synthetic_test_classes,
            cfg.synthetic_per_class,
            cfg.synthetic_side,
            cfg.synthetic_seed,
        )?,
    };
    Ok(Splits { train, val, test })
}

pub fn backbone_config(cfg: &ExperimentConfig) -> BackboneConfig {
    let (side, channels) = cfg.image_geometry();
    let head = match cfg.learner {
        LearnerKind::Maml => Head::Linear(cfg.n_way),
        LearnerKind::Protonet => Head::Embedding,
    };
    BackboneConfig { in_channels: channels, side, blocks: cfg.blocks, filters: cfg.filters, head }
}

/// Freshly initialized learner for `cfg`.
pub fn init_learner(cfg: &ExperimentConfig) -> Result<LearnerState> {
    let mut rng = RngStream::new(tagged_seed(cfg.seed, TAG_INIT));
    let params = init_backbone(backbone_config(cfg), &mut rng)?;
    Ok(match cfg.learner {
        LearnerKind::Protonet => LearnerState::Protonet(ProtoNetLearner::new(params, cfg.protonet_config())),
        LearnerKind::Maml => LearnerState::Maml(MamlLearner::new(params, cfg.maml_config())?),
    })
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn learner_train_step(learner: &mut LearnerState, batch: &[Episode], epoch: usize) -> Result<f64> {
    match learner {
        LearnerState::Protonet(l) => {
            let lr = l.config.lr;
            protonet_meta_train_step(l, batch, lr)
        }
        LearnerState::Maml(l) => Ok(meta_update(l, batch, epoch)?.loss),
    }
}

/// Target accuracy on one supervised episode, without updating the learner.
pub fn learner_evaluate(learner: &LearnerState, ep: &Episode) -> Result<f64> {
    match learner {
        LearnerState::Protonet(l) => protonet_evaluate(&l.params, ep, l.config.metric, l.config.eval_norm),
        LearnerState::Maml(l) => maml_evaluate(&l.meta, &l.config, ep),
    }
}

fn eval_spec(cfg: &ExperimentConfig) -> EpisodeSpec {
    EpisodeSpec::supervised(cfg.n_way, cfg.k_shot, cfg.target_per_class)
}

/// Episode `i` of the validation bank.
pub fn validation_episode(cfg: &ExperimentConfig, val: &DatasetIndex, i: usize) -> Result<Episode> {
    let mut rng = RngStream::derive(tagged_seed(cfg.seed, TAG_VAL), i as u64);
    sample_supervised_episode(val, &eval_spec(cfg), &mut rng)
}

/// Mean accuracy over the whole validation bank.
pub fn validation_accuracy(learner: &LearnerState, cfg: &ExperimentConfig, val: &DatasetIndex) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..cfg.val_episodes {
        sum += learner_evaluate(learner, &validation_episode(cfg, val, i)?)?;
    }
    Ok(sum / cfg.val_episodes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Per-epoch training history of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub policy: String,
    pub learner: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation accuracy, earliest on ties.
    pub best_epoch: Option<usize>,
}

impl TrainingRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_accuracy).collect()
    }
}

pub struct TrainingRun {
    pub record: TrainingRecord,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

fn checkpoint(cfg: &ExperimentConfig, policy: &str, epoch: usize, val: Option<f64>, learner: &LearnerState) -> Checkpoint {
    let meta = CheckpointMeta {
        dataset: cfg.dataset.to_string(),
        policy: policy.to_string(),
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        seed: cfg.seed,
        epoch,
        val_accuracy: val,
    };
    Checkpoint::new(meta, learner.clone())
}

fn with_position(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

pub fn run_meta_training(cfg: &ExperimentConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    run_meta_training_on(cfg, &load_splits(cfg)?)
}

/// Meta-trains on `splits.train`, scoring every epoch on the validation bank.
///
/// Writes `last.json`, `best.json` and `record.json` under `cfg.out` after
/// every epoch. With zero epochs the initial learner is both best and last.
pub fn run_meta_training_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<TrainingRun> {
    cfg.validate()?;
    let policy = cfg.policy()?;
    let policy_name = policy.name();
    if cfg.dataset == DatasetKind::MiniImagenet && cfg.epochs > 5 && cfg.train_episodes == TrainEpisodes::Aal {
        log::info!("unsupervised meta-training on Mini-Imagenet tends to overfit after about 5 epochs");
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let (side, channels) = cfg.image_geometry();
    ensure(splits.train.side() == side && splits.train.channels() == channels, || {
        format!("images are {0}x{0}x{1}, config expects {side}x{side}x{channels}", splits.train.side(), splits.train.channels())
    })?;

    let mut learner = init_learner(cfg)?;
    let mut record = TrainingRecord {
        policy: policy_name.clone(),
        learner: cfg.learner.to_string(),
        dataset: cfg.dataset.to_string(),
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best = checkpoint(cfg, &policy_name, 0, None, &learner);
    let mut best_acc = f64::NEG_INFINITY;

    let pool = strip_labels(&splits.train)?;
    let (source, spec) = match cfg.train_episodes {
        TrainEpisodes::Aal => (
            EpisodeSource::Unlabeled(&pool),
            EpisodeSpec::unsupervised(cfg.n_way, cfg.k_shot, cfg.target_multiplicity, policy),
        ),
        TrainEpisodes::Supervised => (EpisodeSource::Labeled(&splits.train), eval_spec(cfg)),
    };
    let mut rng = RngStream::new(tagged_seed(cfg.seed, TAG_TRAIN));

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for step in 0..cfg.episodes_per_epoch {
            let batch = make_meta_batch(source, &spec, cfg.meta_batch, &mut rng)?;
            let loss = learner_train_step(&mut learner, &batch, epoch).map_err(|e| with_position(e, epoch + 1, step))?;
            loss_sum += loss;
        }
        let val = validation_accuracy(&learner, cfg, &splits.val)?;
        let done = epoch + 1;
        let train_loss = loss_sum / cfg.episodes_per_epoch as f64;
        log::info!("epoch {done}: train loss {train_loss:.4}, val accuracy {:.2}%", 100.0 * val);
        record.epochs.push(EpochRecord { epoch: done, train_loss, val_accuracy: val });

        let current = checkpoint(cfg, &policy_name, done, Some(val), &learner);
        current.save(&cfg.out.join(LAST_CHECKPOINT))?;
        if val > best_acc {
            best_acc = val;
            best = current;
            record.best_epoch = Some(done);
            best.save(&cfg.out.join(BEST_CHECKPOINT))?;
        }
        record.save(&cfg.out.join(RECORD_FILE))?;
    }

    let last = checkpoint(cfg, &policy_name, cfg.epochs, record.epochs.last().map(|e| e.val_accuracy), &learner);
    if cfg.epochs == 0 {
        best.save(&cfg.out.join(BEST_CHECKPOINT))?;
        last.save(&cfg.out.join(LAST_CHECKPOINT))?;
        record.save(&cfg.out.join(RECORD_FILE))?;
    }
    Ok(TrainingRun { record, best, last })
}

/// Rejects checkpoints that cannot be evaluated under `cfg`.
pub fn check_compatible(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    ensure(ck.learner.kind_name() == cfg.learner.to_string(), || {
        format!("checkpoint holds a {} learner, config asks for {}", ck.learner.kind_name(), cfg.learner)
    })?;
    ensure(ck.meta.dataset == cfg.dataset.to_string(), || {
        format!("checkpoint was trained on {}, config evaluates {}", ck.meta.dataset, cfg.dataset)
    })?;
    let bc = match &ck.learner {
        LearnerState::Protonet(l) => &l.params.config,
        LearnerState::Maml(l) => &l.meta.theta.config,
    };
    let (side, channels) = cfg.image_geometry();
    ensure(bc.side == side && bc.in_channels == channels, || {
        format!("checkpoint expects {0}x{0}x{1} inputs, config has {side}x{side}x{channels}", bc.side, bc.in_channels)
    })?;
    if let Head::Linear(n) = bc.head {
        ensure(n == cfg.n_way, || format!("checkpoint head has {n} outputs, config is {}-way", cfg.n_way))?;
    }
    Ok(())
}

pub fn run_final_test(ck: &Checkpoint, cfg: &ExperimentConfig, n_episodes: usize) -> Result<EvalReport> {
    cfg.validate()?;
    check_compatible(ck, cfg)?;
    run_final_test_on(ck, cfg, &load_splits(cfg)?.test, n_episodes)
}

/// Scores `ck` on `n_episodes` test episodes for each of `cfg.eval_seeds`
/// seeds. Reports the mean over seeds and the sample standard deviation of
/// the per-seed means.
pub fn run_final_test_on(ck: &Checkpoint, cfg: &ExperimentConfig, test: &DatasetIndex, n_episodes: usize) -> Result<EvalReport> {
    check_compatible(ck, cfg)?;
    ensure(n_episodes > 0, || "test needs at least one episode".into())?;
    ensure(cfg.eval_seeds > 0, || "eval_seeds must be positive".into())?;
    let spec = eval_spec(cfg);
    let base = tagged_seed(cfg.seed, TAG_TEST);
    let mut seed_means = Vec::with_capacity(cfg.eval_seeds);
    for s in 0..cfg.eval_seeds {
        let mut rng = RngStream::derive(base, s as u64);
        let mut sum = 0.0;
        for _ in 0..n_episodes {
            sum += learner_evaluate(&ck.learner, &sample_supervised_episode(test, &spec, &mut rng)?)?;
        }
        seed_means.push(sum / n_episodes as f64);
    }
    let (mean_acc, dispersion) = mean_and_std(&seed_means);
    let report = EvalReport {
        policy: ck.meta.policy.clone(),
        learner: ck.learner.kind_name().to_string(),
        dataset: cfg.dataset.to_string(),
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        split: EvalSplit::Test,
        mean_acc,
        dispersion,
        episodes: n_episodes,
        seed: cfg.seed,
        epoch: ck.meta.epoch,
    };
    report.check()?;
    Ok(report)
}

pub struct GridOutcome {
    /// Successful runs, sorted by policy name.
    pub reports: Vec<EvalReport>,
    pub records: Vec<TrainingRecord>,
    /// `(policy, error message)` for every run that failed.
    pub failures: Vec<(String, String)>,
}

/// Canonical, de-duplicated policy names; every name must be valid.
pub fn grid_policies(base: &ExperimentConfig, policies: &[String]) -> Result<Vec<String>> {
    let profile = base.dataset.augment_profile();
    let mut out: Vec<String> = Vec::new();
    for p in policies {
        let name = policy_from_name(p, profile)?.name();
        ExperimentConfig { augment: name.clone(), ..base.clone() }.validate()?;
        if out.contains(&name) {
            log::warn!("policy {name} listed more than once; running it once");
        } else {
            out.push(name);
        }
    }
    ensure(!out.is_empty(), || "ablation grid needs at least one policy".into())?;
    out.sort();
    Ok(out)
}

/// One train+test run per policy with shared seeds, each under
/// `base.out/<policy>`. Writes `results.csv` and `results.md` to `base.out`.
/// A failing run is logged and recorded; the grid carries on.
pub fn run_ablation_grid(base: &ExperimentConfig, policies: &[String]) -> Result<GridOutcome> {
    let names = grid_policies(base, policies)?;
    let splits = load_splits(base)?;
    let mut out = GridOutcome { reports: Vec::new(), records: Vec::new(), failures: Vec::new() };
    for name in names {
        let cfg = ExperimentConfig { augment: name.clone(), out: base.out.join(&name), ..base.clone() };
        let run = run_meta_training_on(&cfg, &splits)
            .and_then(|run| Ok((run_final_test_on(&run.best, &cfg, &splits.test, cfg.test_episodes)?, run.record)));
        match run {
            Ok((report, record)) => {
                out.reports.push(report);
                out.records.push(record);
            }
            Err(e) => {
                log::error!("policy {name} failed: {e}");
                out.failures.push((name, e.to_string()));
            }
        }
    }
    if !out.reports.is_empty() {
        for fmt in [ResultFormat::Csv, ResultFormat::Markdown] {
            emit_results(&out.reports, fmt, &base.out.join(format!("results.{}", fmt.extension())))?;
        }
    }
    Ok(out)
}
