use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use selfremix::datagen::{load_manifest, write_split, Dataset, Split, MANIFEST_NAME};
use selfremix::separator::Checkpoint;
use selfremix::trainer::{
    evaluate_model, evaluate_unprocessed, run_training, ExperimentConfig, Method, TrainData, METRICS_FILE,
};
use selfremix::Scalar;

mod plot;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] selfremix::Error),
    #[error("{0}")]
    Usage(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "selfremix", version, about = "Self-remixing source separation toolkit")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/valid/test splits as WAV files with manifests.
    GenerateData(GenerateArgs),
    /// Train from scratch with PIT or MixIT.
    Pretrain(TrainArgs),
    /// Refine a pretrained model without labels.
    Refine(TrainArgs),
    /// Semi-supervised adaptation: PIT on a labeled set plus an unsupervised method.
    Adapt(AdaptArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvalArgs),
    /// Draw training curves from metrics logs.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Experiment config; only its `[data]` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    sample_rate_hz: Option<u32>,
    /// Shifts every mixture seed; use distinct offsets for independent corpora.
    #[arg(long)]
    seed_offset: Option<u64>,
    /// Splits to write (default: all three).
    #[arg(long, value_parser = parse_split)]
    split: Vec<Split>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `train/` and `valid/` manifests.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    method: Option<String>,
    /// Pretrained checkpoint (required for teacher-student methods).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    n_remix: Option<usize>,
    #[arg(long)]
    l_thres: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Train in double precision.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Directory with a labeled `train/` manifest.
    #[arg(long)]
    ood: PathBuf,
    #[arg(long)]
    unsup_weight: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A split directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Project outputs to sum to the mixture before scoring.
    #[arg(long)]
    mc: bool,
    /// Also write the summary as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Metrics logs, or run directories containing one.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train, valid, test)")),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut data = load_config(args.config.as_deref())?.data;
    if let Some(v) = args.n_train {
        data.n_train = v;
    }
    if let Some(v) = args.n_valid {
        data.n_valid = v;
    }
    if let Some(v) = args.n_test {
        data.n_test = v;
    }
    if let Some(v) = args.duration_s {
        data.duration_s = v;
    }
    if let Some(v) = args.sample_rate_hz {
        data.sample_rate_hz = v;
    }
    if let Some(v) = args.seed_offset {
        data.seed_offset = v;
    }
    let splits = if args.split.is_empty() {
        vec![Split::Train, Split::Valid, Split::Test]
    } else {
        args.split
    };
    for split in splits {
        let manifest = write_split(&data, split, &args.out)?;
        println!("{}", manifest.display());
    }
    Ok(())
}

/// Applies flag overrides; `allowed` lists the methods the subcommand runs.
fn train_config(args: &TrainArgs, allowed: &[Method], semi_supervised: bool) -> Result<ExperimentConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(m) = &args.method {
        t.method = Method::parse(m).ok_or_else(|| CliError::Usage(format!("unknown method `{m}`")))?;
    }
    if !allowed.contains(&t.method) {
        let names: Vec<_> = allowed.iter().map(|m| m.name().replace('_', "-")).collect();
        return Err(CliError::Usage(format!(
            "method `{}` is not available here; choose one of {}",
            t.method,
            names.join(", ")
        )));
    }
    t.seed = args.seed;
    t.semi_supervised = semi_supervised;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if args.max_steps.is_some() {
        t.max_steps = args.max_steps;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.grad_accum_steps {
        t.grad_accum_steps = v;
    }
    if let Some(v) = args.lr {
        t.peak_lr = v;
    }
    if let Some(v) = args.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = args.n_remix {
        t.n_remix = v;
    }
    if args.l_thres.is_some() {
        t.loss.l_thres = args.l_thres;
    }
    if args.alpha.is_some() {
        t.alpha = args.alpha;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn train<T: Scalar>(cfg: &ExperimentConfig, args: &TrainArgs, ood_dir: Option<&Path>) -> Result<()> {
    let train = load_manifest::<T>(&args.data.join(Split::Train.name()).join(MANIFEST_NAME))?;
    let valid = load_manifest::<T>(&args.data.join(Split::Valid.name()).join(MANIFEST_NAME))?;
    let ood: Option<Dataset<T>> = match ood_dir {
        Some(d) => Some(load_manifest::<T>(&manifest_path(&d.join(Split::Train.name())))?),
        None => None,
    };
    let init = match &args.init {
        Some(p) => Some(Checkpoint::<T>::load(p)?.into_model()?),
        None => None,
    };
    info!(
        "training {} on {} mixtures ({} validation)",
        cfg.train.method,
        train.len(),
        valid.len()
    );
    let out = run_training(
        cfg,
        TrainData {
            train: &train,
            valid: &valid,
            ood: ood.as_ref(),
        },
        init.as_ref(),
        &args.out,
    )?;
    println!("{}", serde_json::to_string_pretty(&out.report)?);
    Ok(())
}

fn evaluate<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let model = Checkpoint::<T>::load(&args.checkpoint)?.into_model()?;
    let data = load_manifest::<T>(&manifest_path(&args.data))?;
    let summary = serde_json::json!({
        "checkpoint": args.checkpoint,
        "mc": args.mc,
        "model": evaluate_model(&model, &data, args.mc)?,
        "unprocessed": evaluate_unprocessed(&data)?,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    println!("{text}");
    if let Some(path) = &args.out {
        std::fs::write(path, &text).map_err(|e| CliError::Usage(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    use Method::*;
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Pretrain(a) => {
            let cfg = train_config(&a, &[Pit, Mixit], false)?;
            if a.f64 {
                train::<f64>(&cfg, &a, None)
            } else {
                train::<f32>(&cfg, &a, None)
            }
        }
        Command::Refine(a) => {
            let cfg = train_config(
                &a,
                &[Remixit, Rccl, SelfRemixingPair, SelfRemixingBatch, RemixitPlusSelfRemixing],
                false,
            )?;
            if a.f64 {
                train::<f64>(&cfg, &a, None)
            } else {
                train::<f32>(&cfg, &a, None)
            }
        }
        Command::Adapt(a) => {
            let mut cfg = train_config(
                &a.train,
                &[Remixit, Rccl, SelfRemixingPair, SelfRemixingBatch, RemixitPlusSelfRemixing],
                true,
            )?;
            if let Some(w) = a.unsup_weight {
                cfg.train.unsup_weight = w;
                cfg.validate()?;
            }
            if a.train.f64 {
                train::<f64>(&cfg, &a.train, Some(&a.ood))
            } else {
                train::<f32>(&cfg, &a.train, Some(&a.ood))
            }
        }
        Command::Evaluate(a) => {
            if a.f64 {
                evaluate::<f64>(&a)
            } else {
                evaluate::<f32>(&a)
            }
        }
        Command::Plot(a) => {
            let logs: Vec<PathBuf> = a
                .metrics
                .iter()
                .map(|p| if p.is_dir() { p.join(METRICS_FILE) } else { p.clone() })
                .collect();
            plot::training_curves(&logs, &a.out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
