use std::fs;
use std::path::{Path, PathBuf};

use aal_core::checkpoint::Checkpoint;
use aal_core::data::strip_labels;
use aal_core::episode::{dump_episode, sample_supervised_episode, sample_unsupervised_episode, EpisodeSpec};
use aal_core::harness::{
    emit_plots, emit_results, load_splits, run_ablation_grid, run_final_test, run_meta_training, validation_episode,
    DatasetKind, ExperimentConfig, LearnerKind, ResultFormat, TrainingRecord, BEST_CHECKPOINT,
};
use aal_core::RngStream;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aal", version, about = "Few-shot meta-learning from unlabeled images")]
struct Cli {
    /// TOML experiment config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, validating after every epoch.
    Train(RunArgs),
    /// Evaluate a checkpoint on test episodes.
    Test(TestArgs),
    /// Train and test once per augmentation policy.
    Ablate(AblateArgs),
    /// Episode inspection.
    #[command(subcommand)]
    Episodes(EpisodesCommand),
    /// Augmentation policy inspection.
    #[command(subcommand)]
    Policy(PolicyCommand),
    /// Plot validation curves from training records.
    Plot(PlotArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long, value_enum)]
    learner: Option<LearnerArg>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    target_per_class: Option<usize>,
    /// Policy name such as CHV, CHVW or CHVR+CUT+DROP.
    #[arg(long, value_name = "POLICY")]
    augment: Option<String>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    second_order: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    msl: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `<out>/best.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Episodes per evaluation seed; defaults to the config's test_episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<String>,
}

#[derive(Subcommand)]
enum EpisodesCommand {
    /// Write sampled episodes as PNG files plus labels.json.
    Dump(DumpArgs),
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Print a policy's parameters and write augmented samples.
    Dump(PolicyDumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Unsupervised episodes from the unlabeled training pool.
    Train,
    /// The validation bank.
    Val,
    Test,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct PolicyDumpArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Source images taken from the training split.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Augmented copies per source image.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Where to write images; without it only the parameters are printed.
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// `record.json` files, one curve each.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Omniglot,
    Miniimagenet,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnerArg {
    Maml,
    Protonet,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(d) = self.dataset {
            cfg.dataset = match d {
                DatasetArg::Omniglot => DatasetKind::Omniglot,
                DatasetArg::Miniimagenet => DatasetKind::MiniImagenet,
                DatasetArg::Synthetic => DatasetKind::Synthetic,
            };
        }
        if let Some(l) = self.learner {
            cfg.learner = match l {
                LearnerArg::Maml => LearnerKind::Maml,
                LearnerArg::Protonet => LearnerKind::Protonet,
            };
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(n_way, k_shot, target_per_class, augment, inner_steps, second_order, msl, epochs, episodes_per_epoch, meta_batch, seed, out);
        if let Some(root) = &self.data_root {
            cfg.data_root = Some(root.clone());
        }
    }
}

fn load_config(path: Option<&Path>, run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    run.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join("config.toml");
    fs::write(&path, cfg.to_toml_string()?).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    write_config(cfg)?;
    let run = run_meta_training(cfg)?;
    if !run.record.epochs.is_empty() {
        emit_plots(std::slice::from_ref(&run.record), &cfg.out)?;
    }
    match run.record.best_epoch {
        Some(e) => println!(
            "best epoch {e}: val accuracy {:.2}% ({})",
            100.0 * run.best.meta.val_accuracy.unwrap_or(0.0),
            cfg.out.join(BEST_CHECKPOINT).display()
        ),
        None => println!("no training epochs; initial checkpoint at {}", cfg.out.join(BEST_CHECKPOINT).display()),
    }
    Ok(())
}

fn test(cfg: &ExperimentConfig, args: &TestArgs) -> Result<()> {
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
    let ck = Checkpoint::load(&path)?;
    let report = run_final_test(&ck, cfg, args.episodes.unwrap_or(cfg.test_episodes))?;
    for fmt in [ResultFormat::Csv, ResultFormat::Markdown] {
        emit_results(std::slice::from_ref(&report), fmt, &cfg.out.join(format!("test_results.{}", fmt.extension())))?;
    }
    println!(
        "{} {} {}-way {}-shot test: {} over {} episodes x {} seeds",
        report.learner,
        report.policy,
        report.n_way,
        report.k_shot,
        report.cell(),
        report.episodes,
        cfg.eval_seeds
    );
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, policies: &[String]) -> Result<()> {
    write_config(cfg)?;
    let grid = run_ablation_grid(cfg, policies)?;
    for r in &grid.reports {
        println!("{:<16} {}", r.policy, r.cell());
    }
    for (p, e) in &grid.failures {
        println!("{p:<16} FAILED: {e}");
    }
    if !grid.records.is_empty() {
        emit_plots(&grid.records, &cfg.out)?;
    }
    if grid.reports.is_empty() {
        bail!("every run of the grid failed");
    }
    Ok(())
}

fn dump_episodes(cfg: &ExperimentConfig, args: &DumpArgs) -> Result<()> {
    let splits = load_splits(cfg)?;
    let supervised = EpisodeSpec::supervised(cfg.n_way, cfg.k_shot, cfg.target_per_class);
    let pool = strip_labels(&splits.train)?;
    let mut rng = RngStream::new(cfg.seed);
    for i in 0..args.count {
        let ep = match args.split {
            SplitArg::Train => {
                let spec = EpisodeSpec::unsupervised(cfg.n_way, cfg.k_shot, cfg.target_multiplicity, cfg.policy()?);
                sample_unsupervised_episode(&pool, &spec, &mut rng)?
            }
            SplitArg::Val => validation_episode(cfg, &splits.val, i)?,
            SplitArg::Test => sample_supervised_episode(&splits.test, &supervised, &mut rng)?,
        };
        dump_episode(&ep, &args.dir.join(format!("episode_{i:03}")))?;
    }
    println!("wrote {} episodes to {}", args.count, args.dir.display());
    Ok(())
}

fn dump_policy(cfg: &ExperimentConfig, args: &PolicyDumpArgs) -> Result<()> {
    let policy = cfg.policy()?;
    let json = serde_json::to_string_pretty(&policy)?;
    println!("{}\n{json}", policy.name());
    let Some(dir) = &args.dir else { return Ok(()) };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("policy.json"), &json)?;
    let splits = load_splits(cfg)?;
    let mut rng = RngStream::new(cfg.seed);
    for i in 0..args.images.min(splits.train.len()) {
        let img = splits.train.image(i);
        img.save_png(&dir.join(format!("{i:03}_orig.png")))?;
        for s in 0..args.samples {
            policy.apply(&img, &mut rng)?.save_png(&dir.join(format!("{i:03}_aug{s:02}.png")))?;
        }
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<()> {
    let records = args.records.iter().map(|p| TrainingRecord::load(p)).collect::<Result<Vec<_>, _>>()?;
    for p in emit_plots(&records, &args.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Train(run) => train(&load_config(config, run)?),
        Command::Test(args) => test(&load_config(config, &args.run)?, args),
        Command::Ablate(args) => ablate(&load_config(config, &args.run)?, &args.policies),
        Command::Episodes(EpisodesCommand::Dump(args)) => dump_episodes(&load_config(config, &args.run)?, args),
        Command::Policy(PolicyCommand::Dump(args)) => dump_policy(&load_config(config, &args.run)?, args),
        Command::Plot(args) => plot(args),
    }
}
