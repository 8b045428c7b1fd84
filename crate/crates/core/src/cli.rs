//! Batch command-line surface: ingest, train, evaluate, predict.
//!
//! Every command is idempotent given identical inputs and seed. Exit codes:
//! 0 success, 2 input/schema errors, 3 internal/runtime errors.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::data::{
    build_splits, load_records, read_cache, write_cache, ClimateTable, GridCell, IngestManifest,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, predict, save_checkpoint, AblationFlags};
use crate::train::{
    categorize, emit_series, evaluate, train_with_progress, AdamHyper, TrainConfig,
};

pub const CACHE_FILE: &str = "samples.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.sqm";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(
    name = "square-mamba",
    version,
    about = "Monthly drought-index forecasting with a hybrid quantum-classical Mamba network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Parse a climate table, build windowed samples, persist the split cache
    Ingest(IngestArgs),
    /// Train on an ingested cache and write checkpoint plus epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test split
    Evaluate(EvaluateArgs),
    /// Predict the next month's drought condition from one window file
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Climate table (header: date,lat,lon,pre,tmx,tmn,tmp,vap,cld,pet,spei1)
    #[arg(long)]
    pub data: PathBuf,
    /// Center cell latitude in degrees
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    /// Center cell longitude in degrees
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
    /// Output directory for the sample cache and manifest
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory holding the ingested cache; outputs land here too
    #[arg(long)]
    pub out: PathBuf,
    /// Optional TOML config; command-line flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Bypass the spatial encoder (ablation)
    #[arg(long = "no-seb")]
    pub no_seb: bool,
    /// Drop the quantum temporal branch (ablation)
    #[arg(long = "no-qltem")]
    pub no_qltem: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory holding the ingested cache
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path; defaults to <out>/checkpoint.sqm
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate: val or test
    #[arg(long)]
    pub split: String,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Window file in the ingestion schema (15 months, 3x3 cells)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
}

/// Optional config file; any present key becomes the default the
/// command-line flags can still override.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    no_seb: Option<bool>,
    no_qltem: Option<bool>,
    lr0: Option<f64>,
    patience: Option<usize>,
    min_delta: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Predict(args) => cmd_predict(&args),
    }
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let records = load_records(&args.data)?;
    let row_count = records.len();
    let table = ClimateTable::new(records);
    let center = GridCell::from_degrees(args.lat, args.lon)?;
    let (split, skipped) = build_splits(&table, center)?;
    let (train_n, val_n, test_n) = split.counts();
    if train_n + val_n + test_n == 0 {
        eprintln!("warning: no eligible samples for ({}, {})", args.lat, args.lon);
    }
    for s in &skipped {
        eprintln!("skipped {}: {}", s.target_month, s.reason);
    }
    std::fs::create_dir_all(&args.out)?;
    let cache_meta = write_cache(&args.out.join(CACHE_FILE), center, &split)?;
    let locations: Vec<(f64, f64)> =
        table.locations().iter().map(|c| (c.lat(), c.lon())).collect();
    let manifest = IngestManifest {
        locations,
        first_month: cache_meta.first_month.clone(),
        last_month: cache_meta.last_month.clone(),
        row_count,
        center: (center.lat(), center.lon()),
        train: train_n,
        validation: val_n,
        test: test_n,
        skipped,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(args.out.join(MANIFEST_FILE), json)?;
    println!("ingested {row_count} rows");
    println!("train {train_n}  validation {val_n}  test {test_n}");
    Ok(())
}

fn effective_config(args: &TrainArgs) -> Result<(TrainConfig, serde_json::Value)> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))?
        }
        None => FileConfig::default(),
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        max_epochs: args.epochs.or(file.epochs).unwrap_or(defaults.max_epochs),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        flags: AblationFlags {
            no_seb: args.no_seb || file.no_seb.unwrap_or(false),
            no_qltem: args.no_qltem || file.no_qltem.unwrap_or(false),
        },
        hyper: AdamHyper {
            lr0: file.lr0.unwrap_or(defaults.hyper.lr0),
            ..defaults.hyper
        },
        patience: file.patience.unwrap_or(defaults.patience),
        min_delta: file.min_delta.unwrap_or(defaults.min_delta),
    };
    config.validate()?;
    let echo = serde_json::json!({
        "command": "train",
        "epochs": config.max_epochs,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "no_seb": config.flags.no_seb,
        "no_qltem": config.flags.no_qltem,
        "lr0": config.hyper.lr0,
        "weight_decay": config.hyper.weight_decay,
        "patience": config.patience,
        "min_delta": config.min_delta,
    });
    Ok((config, echo))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cache_path = args.out.join(CACHE_FILE);
    if !cache_path.exists() {
        return Err(Error::Validation(format!(
            "no sample cache at {}; run `square-mamba ingest --out {}` first",
            cache_path.display(),
            args.out.display()
        )));
    }
    let (split, _) = read_cache(&cache_path)?;
    let (config, echo) = effective_config(args)?;
    println!("config: {echo}");
    let started = Instant::now();
    let outcome = train_with_progress(&split, &config, |rec, wall| {
        eprintln!(
            "epoch {:3}  lr {:.3e}  train {:.5}  val {:.5}  val_r2 {}  wall {:.1}s",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.val_loss,
            rec.val_r2.map_or("undefined".into(), |r| format!("{r:.4}")),
            wall.as_secs_f64()
        );
    })?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.params, config.seed, outcome.best_epoch as u32, &ckpt)?;
    crate::train::write_log(&outcome.log, &args.out.join(LOG_FILE), &echo)?;
    println!(
        "trained {} epochs ({:?}), best epoch {} with validation R2 {}",
        outcome.epochs_run,
        outcome.stop,
        outcome.best_epoch,
        outcome.best_val_r2.map_or("undefined".into(), |r| format!("{r}")),
    );
    println!("wall time {:.1}s", started.elapsed().as_secs_f64());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (split, _) = read_cache(&args.out.join(CACHE_FILE))?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    let (mut params, _meta) = load_checkpoint(&ckpt_path)?;
    let samples = match args.split.as_str() {
        "val" | "validation" => &split.validation,
        "test" => &split.test,
        other => {
            return Err(Error::Usage(format!("unknown split '{other}' (expected val or test)")))
        }
    };
    let report = evaluate(&mut params, samples)?;
    let out_file = args.out.join(format!("predictions_{}.csv", args.split));
    emit_series(&report, &out_file)?;
    println!("samples {}", report.series.len());
    println!("MAE {}", report.mae);
    println!("RMSE {}", report.rmse);
    println!("R2 {}", report.r2_label());
    println!("series {}", out_file.display());
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (mut params, _meta) = load_checkpoint(&args.checkpoint)?;
    let records = load_records(&args.data)?;
    let table = ClimateTable::new(records);
    let center = GridCell::from_degrees(args.lat, args.lon)?;
    let Some((_, last)) = table.month_range(center) else {
        return Err(Error::Validation(format!(
            "window file has no rows for center ({}, {})",
            args.lat, args.lon
        )));
    };
    let start = last.offset(-(crate::model::layout::MONTHS as i64 - 1));
    let window = crate::data::center_window(&table, center, start)?;
    let augmented = crate::data::augment_spatial(&table, center, start)?;
    let (z, tz) = crate::data::standardize_window(&window, &augmented)?;
    let d = predict(&mut params, &z, &tz)?;
    let category = categorize(d)?;
    println!("target month {}", last.offset(1));
    println!("d = {d:.4}");
    println!("category = {category}");
    Ok(())
}

/// Entry point used by the binary: run and map errors to exit codes.
pub fn main_with_exit_codes() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
