//! `tvmerge`: merge fine-tuned checkpoints, score quadruple extractions, and
//! train tiny fixture models for exercising the pipeline end to end.
//!
//! Exit codes: 0 success, 2 validation or usage error, 3 I/O or format error.
//! Machine output goes to files or stdout; diagnostics go to stderr. Output
//! files are written to a temporary file and renamed, so failures never leave
//! partial artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tvmerge_core::checkpoint::Checkpoint;
use tvmerge_core::error::{CheckpointError, MergeError, MetricsError, TrainError};
use tvmerge_core::merge::{merge_models, MergeConfig};
use tvmerge_core::metrics::{read_extractions, score};
use tvmerge_core::prune::PruneConfig;
use tvmerge_core::trainer::{make_task_dataset, train, TaskId, TinyModel, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tvmerge",
    version,
    about = "Task-vector checkpoint merging toolkit"
)]
struct Cli {
    /// Suppress informational messages and warnings on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge fine-tuned checkpoints into a base via prune / direct / merge.
    Merge(MergeArgs),
    /// Score predicted quadruple extractions against a gold file.
    Score(ScoreArgs),
    /// Fine-tune a tiny classifier on a synthetic task and save it.
    TrainToy(TrainToyArgs),
    /// Emit a random base checkpoint of the fixed tiny architecture.
    Synth(SynthArgs),
    /// List tensor names, dtypes, shapes, and parameter counts as JSON.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MergeArgs {
    /// Base checkpoint the task vectors are built against.
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint; repeat for each model.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Percentage of large-magnitude outliers dropped per layer.
    #[arg(long, default_value_t = 20.0)]
    alpha: f64,
    /// Percentage of small-magnitude perturbations dropped per layer.
    #[arg(long, default_value_t = 20.0)]
    beta: f64,
    /// Scale applied to the merged task vector.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write per-layer statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predictions, JSON Lines of {"id", "output"}.
    #[arg(long)]
    pred: PathBuf,
    /// Gold annotations in the same format.
    #[arg(long)]
    gold: PathBuf,
    /// Write the full score report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Synthetic task to fit (A or B).
    #[arg(long)]
    task: TaskId,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the base model, the dataset, and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    reg_lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Number of synthetic training samples.
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint file to describe.
    file: PathBuf,
}

/// A command failure carrying its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn validation(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match &e {
            CheckpointError::Incompatible { .. } | CheckpointError::InvalidTensor { .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<MergeError> for Failure {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Checkpoint(inner) => inner.into(),
            other => Failure {
                code: 2,
                msg: other.to_string(),
            },
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let code = match &e {
            MetricsError::DuplicateSampleId { .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Diverged { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Merge(args) => cmd_merge(args, quiet),
        Command::Score(args) => cmd_score(args, quiet),
        Command::TrainToy(args) => cmd_train_toy(args, quiet),
        Command::Synth(args) => cmd_synth(args, quiet),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Write bytes to a sibling temporary file and rename it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let io_fail = |e: std::io::Error| Failure {
        code: 3,
        msg: format!("cannot write {}: {e}", path.display()),
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_fail)?;
    tmp.write_all(bytes).map_err(io_fail)?;
    tmp.persist(path).map_err(|e| io_fail(e.error))?;
    Ok(())
}

fn cmd_merge(args: MergeArgs, quiet: bool) -> Result<(), Failure> {
    let cfg = MergeConfig {
        prune: PruneConfig::new(args.alpha, args.beta),
        lambda: args.lambda,
        report_stats: args.stats.is_some(),
    };
    cfg.validate()?;

    let base = Checkpoint::load(&args.base)?;
    let models = args
        .models
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>, _>>()?;

    let outcome = merge_models(&base, &models, &cfg)?;
    outcome.merged.save(&args.out)?;
    if let (Some(stats_path), Some(stats)) = (&args.stats, &outcome.stats) {
        let json = serde_json::to_vec_pretty(stats).expect("stats serialize");
        write_atomic(stats_path, &json)?;
    }
    if !quiet {
        eprintln!(
            "merged {} model(s) into {} (alpha={} beta={} lambda={})",
            models.len(),
            args.out.display(),
            args.alpha,
            args.beta,
            args.lambda
        );
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs, quiet: bool) -> Result<(), Failure> {
    let preds = read_extractions(&args.pred)?;
    let golds = read_extractions(&args.gold)?;
    if !quiet {
        for w in preds.warnings.iter().chain(&golds.warnings) {
            eprintln!("warning: {w}");
        }
    }
    let report = score(&preds.samples, &golds.samples)?;
    if let Some(report_path) = &args.report {
        let json = serde_json::to_vec_pretty(&report).expect("report serialize");
        write_atomic(report_path, &json)?;
    }
    println!(
        "hard={:.4} soft={:.4} avg={:.4}",
        report.hard.f1, report.soft.f1, report.average_score
    );
    Ok(())
}

fn cmd_train_toy(args: TrainToyArgs, quiet: bool) -> Result<(), Failure> {
    if args.samples == 0 {
        return Err(Failure::validation("--samples must be at least 1"));
    }
    let cfg = TrainConfig {
        reg_lambda: args.reg_lambda,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        eta: args.lr,
        weight_decay: args.weight_decay,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    // The base model depends on the seed only, so `train-toy --seed N` for
    // tasks A and B shares the base that `synth --seed N` emits.
    let base = TinyModel::random(args.seed);
    let dataset = make_task_dataset(args.task, args.samples, args.seed);
    let ckpt = train(&base, &dataset, &cfg)?;
    ckpt.save(&args.out)?;
    if !quiet {
        let trained = TinyModel::from_checkpoint(&ckpt)?;
        eprintln!(
            "trained task {:?} for {} epochs on {} samples; training accuracy {:.3}; saved {}",
            args.task,
            args.epochs,
            args.samples,
            tvmerge_core::trainer::accuracy(&trained, &dataset),
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs, quiet: bool) -> Result<(), Failure> {
    let ckpt = TinyModel::random(args.seed).to_checkpoint();
    ckpt.save(&args.out)?;
    if !quiet {
        eprintln!(
            "wrote base checkpoint ({} parameters) to {}",
            ckpt.param_count(),
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.file)?;
    let tensors: Vec<serde_json::Value> = ckpt
        .tensors()
        .map(|(name, t)| {
            serde_json::json!({
                "name": name,
                "dtype": t.dtype.tag(),
                "shape": t.shape,
                "params": t.values.len(),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "tensors": tensors,
        "total_params": ckpt.param_count(),
        "metadata": ckpt.metadata,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("inspect serialize")
    );
    Ok(())
}
