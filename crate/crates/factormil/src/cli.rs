//! Command-line entry point: `synth`, `train`, `eval`, and `inspect`
//! subcommands, each writing a run manifest before doing any long work.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::data::{
    generate_synthetic, load_bag_file, load_dataset, save_dataset, Manifest, ManifestBag,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::evaluate_detailed;
use crate::model::{forward, AggMode, PipelineKind};
use crate::train::{
    default_lr_schedule, load_checkpoint, save_checkpoint, train, CheckpointMeta, LrSpan,
    TrainConfig,
};

/// Format version stamped into every run manifest.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "factormil", version, about = "Disentangled multiple-instance bag classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic planted-factor dataset.
    Synth(SynthArgs),
    /// Train a model from a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
    /// Dump the full forward trace for one bag file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120)]
    num_bags: usize,
    #[arg(long, default_value_t = 30)]
    instances_per_bag: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long, default_value_t = 3)]
    num_classes: usize,
    #[arg(long, default_value_t = 0.2)]
    frac_tc: f64,
    #[arg(long, default_value_t = 0.3)]
    frac_me: f64,
    #[arg(long, default_value_t = 0.5)]
    frac_bg: f64,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.15)]
    me_leak: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset manifest to train on.
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for manifest.json, checkpoint.bin, and history.csv.
    #[arg(long)]
    out: PathBuf,
    /// Validation dataset manifest. Mutually exclusive with --train-ratio.
    #[arg(long, conflicts_with = "train_ratio")]
    val_manifest: Option<PathBuf>,
    /// Split the input per class at this train fraction.
    #[arg(long)]
    train_ratio: Option<f64>,
    /// Seed for the split; defaults to --seed.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Constant learning-rate override; without it the staged default
    /// schedule applies (1e-5 / 5e-6 / 1e-6 over epochs 1-50/51-75/76-100).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = AggMode::CentroidWeighted)]
    agg_mode: AggMode,
    #[arg(long, default_value_t = 32)]
    encoder_dim: usize,
    /// Metric rank; defaults to min(encoder_dim, 64).
    #[arg(long)]
    rank: Option<usize>,
    /// Train the mean-pooling baseline instead of the full pipeline.
    #[arg(long, default_value_t = false)]
    mean_pool: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for manifest.json and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-bag rows to per_bag.csv in the run directory.
    #[arg(long, default_value_t = false)]
    per_bag: bool,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single binary bag file.
    #[arg(long)]
    bag: PathBuf,
    /// Run directory for manifest.json and traces/<bag_id>.json.
    #[arg(long)]
    out: PathBuf,
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes the run manifest into `dir` before any long computation starts.
fn write_run_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = json!({
        "command": command,
        "artifact_version": ARTIFACT_VERSION,
        "seed": seed,
        "config": config,
        "inputs": inputs.iter().map(|p| p.to_string_lossy()).collect::<Vec<_>>(),
        "outputs": outputs,
        "unix_time_secs": unix_time(),
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_bags: args.num_bags,
        instances_per_bag: args.instances_per_bag,
        d_in: args.d_in,
        num_classes: args.num_classes,
        fractions: (args.frac_tc, args.frac_me, args.frac_bg),
        separation: args.separation,
        me_leak: args.me_leak,
        noise_std: args.noise_std,
        seed: args.seed,
    };
    cfg.validate()?;
    write_run_manifest(
        &args.out,
        "synth",
        args.seed,
        serde_json::to_value(&cfg)?,
        &[],
        &["manifest.json (dataset)", "bags/"],
    )?;
    let ds = generate_synthetic(&cfg)?;
    let manifest_path = save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} bags ({} classes, dim {}) to {}",
        ds.len(),
        ds.num_classes,
        ds.feature_dim,
        manifest_path.display()
    );
    Ok(())
}

/// Re-lists a subset of an existing dataset manifest with paths resolved
/// against the original manifest location.
fn write_subset_manifest(
    source_manifest: &Path,
    ids: &[String],
    name_suffix: &str,
    out_path: &Path,
) -> Result<()> {
    let text = fs::read_to_string(source_manifest)?;
    let source: Manifest = serde_json::from_str(&text)?;
    let base = source_manifest.parent().unwrap_or_else(|| Path::new("."));
    let wanted: std::collections::HashSet<&String> = ids.iter().collect();
    let bags: Vec<ManifestBag> = source
        .bags
        .iter()
        .filter(|b| wanted.contains(&b.id))
        .map(|b| ManifestBag {
            id: b.id.clone(),
            path: base.join(&b.path).to_string_lossy().into_owned(),
            label: b.label,
        })
        .collect();
    let manifest = Manifest {
        name: format!("{}-{}", source.name, name_suffix),
        num_classes: source.num_classes,
        feature_dim: source.feature_dim,
        bags,
    };
    fs::write(out_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        gamma: args.gamma,
        seed: args.seed,
        lr_schedule: default_lr_schedule(),
        rank: args.rank,
        agg_mode: args.agg_mode,
        encoder_dim: args.encoder_dim,
        pipeline: if args.mean_pool { PipelineKind::MeanPool } else { PipelineKind::Full },
        ..TrainConfig::default()
    };
    if let Some(lr) = args.lr {
        cfg.lr_schedule = vec![LrSpan { start: 1, end: args.epochs, lr }];
    }
    cfg.validate()?;

    write_run_manifest(
        &args.out,
        "train",
        args.seed,
        json!({
            "train": serde_json::to_value(&cfg)?,
            "manifest": args.manifest.to_string_lossy(),
            "val_manifest": args.val_manifest.as_ref().map(|p| p.to_string_lossy().into_owned()),
            "train_ratio": args.train_ratio,
            "split_seed": args.split_seed,
        }),
        &[&args.manifest],
        &["checkpoint.bin", "history.csv"],
    )?;

    let full = load_dataset(&args.manifest)?;
    let (train_ds, val_ds) = if let Some(val_path) = &args.val_manifest {
        (full, Some(load_dataset(val_path)?))
    } else if let Some(ratio) = args.train_ratio {
        let split_seed = args.split_seed.unwrap_or(args.seed);
        let (t, v) = crate::data::split_dataset(&full, ratio, split_seed)?;
        let train_ids: Vec<String> = t.bags.iter().map(|b| b.bag_id.clone()).collect();
        let val_ids: Vec<String> = v.bags.iter().map(|b| b.bag_id.clone()).collect();
        write_subset_manifest(&args.manifest, &train_ids, "train", &args.out.join("train_manifest.json"))?;
        write_subset_manifest(&args.manifest, &val_ids, "val", &args.out.join("val_manifest.json"))?;
        (t, Some(v))
    } else {
        (full, None)
    };

    let (params, history) = train(&cfg, &train_ds, val_ds.as_ref())?;
    let meta = CheckpointMeta {
        d_in: train_ds.feature_dim,
        encoder_dim: cfg.encoder_dim,
        num_classes: train_ds.num_classes,
        rank: cfg.resolved_rank(),
        agg_mode: cfg.agg_mode,
        gamma: cfg.gamma,
        seed: cfg.seed,
        epoch: cfg.epochs,
        pipeline: cfg.pipeline,
    };
    save_checkpoint(&params, &meta, &args.out.join("checkpoint.bin"))?;
    history.write_csv(&args.out.join("history.csv"))?;
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs: loss {:.4}, train acc {:.4}{}",
            last.epoch,
            last.mean_loss,
            last.train_accuracy,
            last.val_accuracy
                .map(|v| format!(", val acc {v:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    write_run_manifest(
        &args.out,
        "eval",
        meta.seed,
        json!({
            "checkpoint": args.checkpoint.to_string_lossy(),
            "manifest": args.manifest.to_string_lossy(),
            "per_bag": args.per_bag,
            "meta": serde_json::to_value(&meta)?,
        }),
        &[&args.checkpoint, &args.manifest],
        &["report.json"],
    )?;
    let ds = load_dataset(&args.manifest)?;
    let (report, rows) = evaluate_detailed(&params, &ds, &meta.loss_config(), meta.pipeline)?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if args.per_bag {
        let mut csv = String::from("bag_id,label,pred,probs,w,tc,me,bg\n");
        for row in &rows {
            let probs = row
                .probs
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(";");
            let w = row
                .w
                .map(|w| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            let fm = row
                .factor_map
                .map(|m| format!("{},{},{}", m.tc, m.me, m.bg))
                .unwrap_or_else(|| ",,".into());
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.bag_id, row.label, row.predicted, probs, w, fm
            ));
        }
        fs::write(args.out.join("per_bag.csv"), csv)?;
    }
    println!(
        "accuracy {:.4}, weighted F1 {:.4}, AUC {:.4}{}",
        report.accuracy,
        report.weighted_f1,
        report.auc_macro_ovr,
        report
            .factor_recovery
            .map(|r| format!(", factor recovery {r:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn run_inspect(args: &InspectArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    write_run_manifest(
        &args.out,
        "inspect",
        meta.seed,
        json!({
            "checkpoint": args.checkpoint.to_string_lossy(),
            "bag": args.bag.to_string_lossy(),
            "meta": serde_json::to_value(&meta)?,
        }),
        &[&args.checkpoint, &args.bag],
        &["traces/"],
    )?;
    let bag = load_bag_file(&args.bag)?;
    if bag.feature_dim() != meta.d_in {
        return Err(Error::Dimension(format!(
            "bag feature dim {} does not match model input dim {}",
            bag.feature_dim(),
            meta.d_in
        )));
    }
    let trace = forward(&params, &bag, &meta.loss_config())?;
    let report = trace.report(&bag.bag_id, bag.label);
    let text = serde_json::to_string_pretty(&report)?;
    let trace_dir = args.out.join("traces");
    fs::create_dir_all(&trace_dir)?;
    fs::write(trace_dir.join(format!("{}.json", bag.bag_id)), &text)?;
    println!("{text}");
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) | Error::DegenerateMetric(_) | Error::UndefinedMetric(_) => 3,
        _ => 2,
    }
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Inspect(args) => run_inspect(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
