//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation (bad
//! hyperparameters, mismatched dimensions, failed gradient check), 2 on
//! I/O and file-format errors (unreadable files, bad magic, malformed
//! config or manifest).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mfs::bench::{compare, compare_csv, BenchError, CompareOptions, DEFAULT_ORACLE_CAP};
use mfs::checkpoint::{load_checkpoint_expecting, save_checkpoint, CheckpointError};
use mfs::classify::{
    greedy_outcomes, outcome_metrics, predict_from_positions, predictions_csv, ClassifyError,
};
use mfs::config::{parse_synthetic_spec, ConfigError, ExperimentConfig};
use mfs::envdata::io::{read_dataset_with_classes, write_dataset};
use mfs::envdata::{cyclic_pad, generate_synthetic_split, DataError, Dataset, Split};
use mfs::learn::train::{check_loss_gradients, history_csv, train, GradCheckSetup, LossKind};
use mfs::learn::LearnError;
use mfs::numerics::Matrix;
use mfs::rng::Rng;
use mfs::sampler::{
    run_episode, Action, ActionSource, EpisodeOptions, ModelDims, ModelParameters, ParamNodes,
    SamplerError,
};

#[derive(Parser)]
#[command(name = "mfs", version, about = "Multi-agent frame sampling for sequence classification")]
struct Cli {
    /// Override every seed in configs and spec files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-video evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and val/ splits) from a spec file.
    GenerateData {
        /// Flat `key = value` spec file.
        spec: PathBuf,
        /// Output directory; `train/` and `val/` are created inside.
        out_dir: PathBuf,
    },
    /// Train a model and save the best checkpoint.
    Train {
        /// Flat `key = value` experiment config.
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.mckp")]
        out: PathBuf,
        /// Write the per-epoch training history CSV here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset with greedy episodes.
    Evaluate {
        checkpoint: PathBuf,
        /// Dataset directory (manifest.tsv plus sequence files).
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Override the config's test-time team size.
        #[arg(long = "N")]
        n: Option<usize>,
        /// Write the per-video prediction CSV here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Compare the learned policy against the baseline strategies.
    Compare {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Extra team sizes for the learned policy, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_sweep: Vec<usize>,
        /// Include the brute-force best-subset oracle when enumerable.
        #[arg(long)]
        with_oracle: bool,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check loss gradients against central finite differences.
    Gradcheck,
    /// Write per-video greedy episode traces as JSON lines.
    Trace {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's test-time team size.
        #[arg(long = "N")]
        n: Option<usize>,
    },
}

#[derive(Debug)]
enum AppError {
    Config(ConfigError),
    Data(DataError),
    Learn(LearnError),
    Classify(ClassifyError),
    Bench(BenchError),
    Checkpoint(CheckpointError),
    Sampler(SamplerError),
    Io(std::io::Error),
    Json(serde_json::Error),
    Invalid(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(e) => e.fmt(f),
            AppError::Data(e) => e.fmt(f),
            AppError::Learn(e) => e.fmt(f),
            AppError::Classify(e) => e.fmt(f),
            AppError::Bench(e) => e.fmt(f),
            AppError::Checkpoint(e) => e.fmt(f),
            AppError::Sampler(e) => e.fmt(f),
            AppError::Io(e) => e.fmt(f),
            AppError::Json(e) => e.fmt(f),
            AppError::Invalid(msg) => f.write_str(msg),
        }
    }
}

macro_rules! from_error {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for AppError {
            fn from(e: $ty) -> Self {
                AppError::$variant(e)
            }
        }
    };
}
from_error!(Config, ConfigError);
from_error!(Data, DataError);
from_error!(Learn, LearnError);
from_error!(Classify, ClassifyError);
from_error!(Bench, BenchError);
from_error!(Checkpoint, CheckpointError);
from_error!(Sampler, SamplerError);
from_error!(Io, std::io::Error);
from_error!(Json, serde_json::Error);

const EXIT_VALIDATION: u8 = 1;
const EXIT_FORMAT: u8 = 2;

fn data_exit(e: &DataError) -> u8 {
    match e {
        DataError::Io(_) | DataError::BadMagic { .. } | DataError::Truncated { .. }
        | DataError::BadManifest { .. } => EXIT_FORMAT,
        _ => EXIT_VALIDATION,
    }
}

fn classify_exit(e: &ClassifyError) -> u8 {
    match e {
        ClassifyError::Data(d) => data_exit(d),
        _ => EXIT_VALIDATION,
    }
}

fn exit_code(e: &AppError) -> u8 {
    match e {
        AppError::Config(c) => match c {
            ConfigError::OutOfRange { .. } => EXIT_VALIDATION,
            _ => EXIT_FORMAT,
        },
        AppError::Data(d) => data_exit(d),
        AppError::Learn(l) => match l {
            LearnError::Data(d) => data_exit(d),
            LearnError::Classify(c) => classify_exit(c),
            _ => EXIT_VALIDATION,
        },
        AppError::Classify(c) => classify_exit(c),
        AppError::Bench(b) => match b {
            BenchError::Data(d) => data_exit(d),
            BenchError::Classify(c) => classify_exit(c),
            _ => EXIT_VALIDATION,
        },
        AppError::Checkpoint(_) => EXIT_FORMAT,
        AppError::Sampler(_) => EXIT_VALIDATION,
        AppError::Io(_) | AppError::Json(_) => EXIT_FORMAT,
        AppError::Invalid(_) => EXIT_VALIDATION,
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, AppError> {
    let text = fs::read_to_string(path)?;
    let mut config = ExperimentConfig::parse(&text)?;
    config.apply_env_overrides(std::env::vars())?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn episode_options(config: &ExperimentConfig, n: Option<usize>) -> Result<EpisodeOptions, AppError> {
    let num_agents = n.unwrap_or(config.n_test);
    if num_agents == 0 {
        return Err(AppError::Invalid("team size N must be at least 1".into()));
    }
    Ok(EpisodeOptions {
        num_agents,
        context_radius: config.context_radius,
        stride: config.stride,
        t_max: config.t_max,
    })
}

fn load_eval_inputs(
    checkpoint: &PathBuf,
    data: &PathBuf,
    config_path: &PathBuf,
    seed: Option<u64>,
) -> Result<(ExperimentConfig, ModelParameters, Dataset), AppError> {
    let config = load_config(config_path, seed)?;
    let params = load_checkpoint_expecting(checkpoint, config.model_dims())?;
    let ds = read_dataset_with_classes(data, config.classes)?;
    Ok((config, params, ds))
}

fn cmd_generate_data(spec: &PathBuf, out_dir: &PathBuf, seed: Option<u64>) -> Result<(), AppError> {
    let text = fs::read_to_string(spec)?;
    let (mut spec, val_videos) = parse_synthetic_spec(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let train = generate_synthetic_split(&spec, Split::Train, spec.videos_per_class)?;
    let val = generate_synthetic_split(&spec, Split::Val, val_videos)?;
    write_dataset(&train, &out_dir.join("train"))?;
    write_dataset(&val, &out_dir.join("val"))?;
    println!(
        "wrote {} train + {} val sequences ({} classes, {} frames x {} features) under {}",
        train.len(),
        val.len(),
        spec.num_classes,
        spec.frames_per_video,
        spec.feat_dim,
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    config_path: &PathBuf,
    out: &PathBuf,
    report: Option<&PathBuf>,
    seed: Option<u64>,
) -> Result<(), AppError> {
    let config = load_config(config_path, seed)?;
    let train_dir = config
        .train_dir
        .clone()
        .ok_or_else(|| AppError::Invalid("config sets no train_dir".into()))?;
    let train_ds = read_dataset_with_classes(&train_dir, config.classes)?;
    let val_ds = config
        .val_dir
        .as_ref()
        .map(|d| read_dataset_with_classes(d, config.classes))
        .transpose()?;

    let outcome = train(&config, &train_ds, val_ds.as_ref(), |e| {
        let val = match (e.val_top1, e.val_map) {
            (Some(t), Some(m)) => format!("  val top1 {t:.3} mAP {m:.3}"),
            _ => String::new(),
        };
        println!(
            "epoch {:>3}  loss {:>8.4}  cls {:.4}  reward {:+.4}  t_stop {:.2}  train top1 {:.3}{}",
            e.epoch,
            e.mean_total_loss,
            e.mean_classification_loss,
            e.mean_reward_sum,
            e.mean_t_stop,
            e.train_accuracy,
            val
        );
    })?;

    save_checkpoint(&outcome.params, out)?;
    if let Some(path) = report {
        fs::write(path, history_csv(&outcome.history))?;
    }
    match outcome.best_epoch {
        Some(epoch) => println!("saved {} (best validation at epoch {epoch})", out.display()),
        None => println!("saved {}", out.display()),
    }
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &PathBuf,
    data: &PathBuf,
    config_path: &PathBuf,
    n: Option<usize>,
    predictions: Option<&PathBuf>,
    seed: Option<u64>,
) -> Result<(), AppError> {
    let (config, params, ds) = load_eval_inputs(checkpoint, data, config_path, seed)?;
    let opts = episode_options(&config, n)?;
    let outcomes = greedy_outcomes(&params, &ds, &opts, config.num_frames)?;
    let metrics = outcome_metrics(&outcomes, config.classes)?;
    println!("top1 {}", metrics.top1);
    println!("mAP {}", metrics.map);
    for (class, ap) in metrics.per_class_ap.iter().enumerate() {
        match ap {
            Some(v) => println!("AP[{class}] {v}"),
            None => println!("AP[{class}] excluded (no positives)"),
        }
    }
    if let Some(path) = predictions {
        let preds: Vec<_> = outcomes.iter().map(|o| o.prediction.clone()).collect();
        let labels: Vec<_> = outcomes.iter().map(|o| o.label).collect();
        fs::write(path, predictions_csv(&preds, &labels))?;
    }
    Ok(())
}

fn cmd_compare(
    checkpoint: &PathBuf,
    data: &PathBuf,
    config_path: &PathBuf,
    n_sweep: &[usize],
    with_oracle: bool,
    out: Option<&PathBuf>,
    seed: Option<u64>,
) -> Result<(), AppError> {
    let (config, params, ds) = load_eval_inputs(checkpoint, data, config_path, seed)?;
    let opts = CompareOptions {
        repeats: 3,
        seed: seed.unwrap_or(config.seed),
        n_sweep: n_sweep.to_vec(),
        with_oracle,
        oracle_cap: DEFAULT_ORACLE_CAP,
    };
    let rows = compare(&params, &ds, &config, &opts)?;
    let csv = compare_csv(&rows);
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>) -> Result<bool, AppError> {
    use Action::{MoveBackward as Back, MoveForward as Fwd, Stay};
    let dims = ModelDims { feat_dim: 4, obs_dim: 6, hidden: 8, classes: 3, context_radius: 1 };
    let mut rng = Rng::from_seed(seed.unwrap_or(0));
    let params = ModelParameters::init(dims, &mut rng);
    let frames: Vec<f64> = (0..8 * 4).map(|_| rng.normal()).collect();
    let seq = mfs::envdata::FrameSequence {
        id: "gradcheck".into(),
        label: 1,
        frames: Matrix::from_vec(8, 4, frames),
        saliency: None,
    };
    let forced = vec![vec![Fwd, Back], vec![Fwd, Stay], vec![Back, Fwd]];
    let setup = GradCheckSetup {
        params: &params,
        seq: &seq,
        opts: EpisodeOptions { num_agents: 2, context_radius: 1, stride: 1, t_max: 3 },
        forced: &forced,
        label: 1,
        gamma: 0.9,
        lambda1: 1.0,
        lambda2: 1.0,
        aux_step_loss: false,
    };

    const TOL: f64 = 1e-4;
    let kinds = [
        ("classification", LossKind::Classification),
        ("policy", LossKind::Policy),
        ("entropy", LossKind::Entropy),
        ("total", LossKind::Total),
    ];
    let mut worst: f64 = 0.0;
    for (name, kind) in kinds {
        let report = check_loss_gradients(&setup, kind, 1e-5)?;
        let verdict = if report.passes(TOL) { "PASS" } else { "FAIL" };
        println!(
            "{name:<14} {verdict}  max rel err {:.2e} over {} entries",
            report.max_rel_err, report.entries_checked
        );
        worst = worst.max(report.max_rel_err);
    }
    let ok = worst <= TOL;
    if ok {
        println!("PASS, max rel err {worst:.2e} < {TOL:.0e}");
    } else {
        println!("FAIL, max rel err {worst:.2e} >= {TOL:.0e}");
    }
    Ok(ok)
}

#[derive(Serialize)]
struct TraceStep {
    positions: Vec<usize>,
    actions: Vec<&'static str>,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    id: &'a str,
    label: usize,
    steps: Vec<TraceStep>,
    final_scores: Vec<f64>,
}

fn cmd_trace(
    checkpoint: &PathBuf,
    data: &PathBuf,
    config_path: &PathBuf,
    out: &PathBuf,
    n: Option<usize>,
    seed: Option<u64>,
) -> Result<(), AppError> {
    let (config, params, ds) = load_eval_inputs(checkpoint, data, config_path, seed)?;
    let opts = episode_options(&config, n)?;
    let mut w = BufWriter::new(fs::File::create(out)?);
    for seq in &ds.sequences {
        let padded = cyclic_pad(seq, config.num_frames)?;
        let mut tape = mfs::numerics::Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let trace = run_episode(&mut tape, &pn, &padded, &opts, ActionSource::Greedy)?;
        let prediction = predict_from_positions(&params, &padded, trace.final_positions())?;
        let record = TraceRecord {
            id: &seq.id,
            label: seq.label,
            steps: trace.steps[..trace.t_stop]
                .iter()
                .map(|s| TraceStep {
                    positions: s.positions.clone(),
                    actions: s.actions.iter().map(|a| a.name()).collect(),
                })
                .collect(),
            final_scores: prediction.scores,
        };
        writeln!(w, "{}", serde_json::to_string(&record)?)?;
    }
    w.flush()?;
    println!("wrote {} trace records to {}", ds.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, AppError> {
    match &cli.command {
        Command::GenerateData { spec, out_dir } => {
            cmd_generate_data(spec, out_dir, cli.seed).map(|()| true)
        }
        Command::Train { config, out, report } => {
            cmd_train(config, out, report.as_ref(), cli.seed).map(|()| true)
        }
        Command::Evaluate { checkpoint, data, config, n, predictions } => {
            cmd_evaluate(checkpoint, data, config, *n, predictions.as_ref(), cli.seed)
                .map(|()| true)
        }
        Command::Compare { checkpoint, data, config, n_sweep, with_oracle, out } => {
            cmd_compare(checkpoint, data, config, n_sweep, *with_oracle, out.as_ref(), cli.seed)
                .map(|()| true)
        }
        Command::Gradcheck => cmd_gradcheck(cli.seed),
        Command::Trace { checkpoint, data, config, out, n } => {
            cmd_trace(checkpoint, data, config, out, *n, cli.seed).map(|()| true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_VALIDATION);
    }
    mfs::runtime::set_threads(cli.threads);
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
