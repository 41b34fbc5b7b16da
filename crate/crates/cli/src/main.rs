use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use coughdetect::commands::{
    detect_file, evaluate_dataset, featurize_file, load_dataset, load_model, model_version, train_dataset,
    write_atomic, Task,
};
use coughdetect::config::{self, AppConfig, Override};
use coughdetect::service::{serve, AppState};
use coughdetect_core::sonograph::TensorMode;
use coughdetect_core::synth::write_family_corpus;
use serde_json::json;

#[derive(Parser)]
#[command(name = "coughdetect", version, about = "Cough detection and DeepCough classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, fold assignment and corpus generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, value_enum, default_value = "covid")]
    task: Task,
    /// Tensor layout: 3d (MFCC, MelSpec, LPCS) or 2d (MelSpec only).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TensorMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the cough segments of a WAV file as JSON (raw sample indices).
    Detect { wav: PathBuf },
    /// Write the tensor of the first cough in a WAV file.
    Featurize {
        wav: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TensorMode>,
        /// Use the whole recording when no cough is detected.
        #[arg(long)]
        whole_fallback: bool,
    },
    /// Train DeepCough on a manifest and write the weights.
    Train {
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Also write the per-epoch training log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stratified k-fold evaluation; prints the report JSON.
    Evaluate {
        manifest: PathBuf,
        /// Score every fold with this model instead of training per fold.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        flags: TrainFlags,
        /// Write the report here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Serve POST /analyze and GET /health.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        workers: Option<usize>,
        /// Keep uploads that opt in with ?store=true here.
        #[arg(long)]
        store_dir: Option<PathBuf>,
    },
    /// Generate the synthetic two-family corpus and its manifest.
    GenCorpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TensorMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "3d" => Ok(TensorMode::ThreeD),
        "2d" => Ok(TensorMode::TwoD),
        _ => Err(format!("unknown mode `{s}`, expected 2d or 3d")),
    }
}

fn push<T: serde::Serialize>(out: &mut Vec<Override>, key: &'static str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key, json!(v)));
    }
}

impl TrainFlags {
    fn overrides(&self, out: &mut Vec<Override>) {
        push(out, "tensor_mode", self.mode);
        push(out, "train.max_epochs", self.epochs);
        push(out, "train.batch_size", self.batch_size);
        push(out, "train.learning_rate", self.learning_rate);
        push(out, "train.early_stop_patience", self.patience);
    }
}

fn load_config(common: &Common, mut flags: Vec<Override>) -> Result<AppConfig> {
    push(&mut flags, "train.rng_seed", common.seed);
    push(&mut flags, "eval.seed", common.seed);
    config::load(common.config.as_deref(), std::env::vars(), &flags)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Detect { wav } => {
            let cfg = load_config(common, vec![])?;
            println!("{}", detect_file(&wav, &cfg)?);
        }
        Command::Featurize { wav, output, mode, whole_fallback } => {
            let mut flags = vec![];
            push(&mut flags, "tensor_mode", mode);
            let cfg = load_config(common, flags)?;
            let tensor = featurize_file(&wav, &cfg, whole_fallback)?;
            write_atomic(&output, &tensor.to_bytes())?;
        }
        Command::Train { manifest, output, flags, log } => {
            let mut o = vec![];
            flags.overrides(&mut o);
            let cfg = load_config(common, o)?;
            let ds = load_dataset(&manifest, &cfg, flags.task)?;
            report_dataset(&ds);
            let (model, training_log) = train_dataset(&ds, &cfg, flags.task)?;
            let bytes = model.to_bytes();
            write_atomic(&output, &bytes)?;
            if let Some(path) = log {
                write_atomic(&path, &serde_json::to_vec_pretty(&training_log)?)?;
            }
            let best = &training_log.epochs[training_log.best_epoch];
            eprintln!(
                "trained {} epochs, best epoch {} (validation metric {:.4}), model {}",
                training_log.epochs.len(),
                best.epoch,
                best.metric,
                model_version(&bytes)
            );
        }
        Command::Evaluate { manifest, model, k, flags, output } => {
            let mut o = vec![];
            flags.overrides(&mut o);
            push(&mut o, "eval.k", k);
            let cfg = load_config(common, o)?;
            let pretrained = model.as_deref().map(load_model).transpose()?;
            let ds = load_dataset(&manifest, &cfg, flags.task)?;
            report_dataset(&ds);
            let report = evaluate_dataset(&ds, &cfg, flags.task, pretrained.as_ref().map(|(m, _)| m))?;
            eprint!("{}", report.to_table());
            let text = serde_json::to_string_pretty(&report)?;
            match output {
                Some(path) => write_atomic(&path, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
        Command::Serve { model, host, port, workers, store_dir } => {
            let mut o = vec![];
            push(&mut o, "service.host", host);
            push(&mut o, "service.port", port);
            push(&mut o, "service.workers", workers);
            push(&mut o, "service.store_dir", store_dir);
            let cfg = load_config(common, o)?;
            let (weights, version) = load_model(&model)?;
            let mut state = AppState::new(weights, version, cfg.pipeline.clone(), cfg.service.workers)?;
            state.store_dir = cfg.service.store_dir.clone();
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(serve(state, &cfg.service.host, cfg.service.port, cfg.service.max_body_bytes))?;
        }
        Command::GenCorpus { dir, per_class } => {
            let manifest = write_family_corpus(&dir, per_class, common.seed.unwrap_or(0))?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn report_dataset(ds: &coughdetect::commands::Dataset) {
    eprintln!(
        "{} recordings ({} without a detected cough, featurised whole; {} rows skipped)",
        ds.tensors.len(),
        ds.undetected,
        ds.skipped
    );
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
