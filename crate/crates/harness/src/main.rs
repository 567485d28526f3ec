use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scalessl::ingest::{ingest_dataset, Dataset};
use scalessl::sweep::{cell_patch_size, load_runs, RunStatus, SweepOptions, SweepSpec};
use scalessl::{emit_report, run_sweep_with, HarnessError};
use scalessl_core::evalkit::evaluate_split;
use scalessl_core::synth::{generate, write_dataset, SynthKind, SynthSpec};
use scalessl_core::train::{
    finetune_segmentation, load_pretrained_encoder, load_segmentation_model, pretrain, select_labeled_subset,
    EncoderInit, FinetuneOptions, PretrainOptions,
};
use scalessl_core::{validate_config, ExperimentConfig, Split, ValidatedConfig};

#[derive(Parser)]
#[command(
    name = "scalessl",
    version,
    about = "Scale-aware self-supervised pretraining for segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment or sweep config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Load a dataset and print its splits and statistics.
    IngestCheck {
        #[arg(long)]
        data: PathBuf,
    },
    /// Self-supervised pretraining of an encoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a segmentation model on the labeled subset.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by `pretrain`.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Stitch and score a fine-tuned model on a split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 200.0)]
        cap: f64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run or resume a sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Execute at most this many cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Write CSV, Markdown and SVG reports for a sweep directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        average_methods: bool,
    },
}

fn load_config(common: &Common) -> Result<ValidatedConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(validate_config(cfg)?)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn unlabeled(ds: &Dataset) -> Vec<scalessl_core::ImageRecord> {
    ds.records
        .iter()
        .filter(|r| matches!(r.split, Split::Pretrain | Split::Train))
        .cloned()
        .collect()
}

fn parse_split(s: &str) -> Result<Split, HarnessError> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| HarnessError::Invalid(format!("unknown split {s}")))
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Synth {
            kind,
            count,
            size,
            density,
            noise,
            common,
        } => {
            let mut spec = SynthSpec {
                count,
                image_size: (size, size),
                seed: common.seed.unwrap_or(0),
                ..SynthSpec::default_for(kind)
            };
            if let Some(d) = density {
                spec.density = d;
            }
            if let Some(n) = noise {
                spec.noise_sigma = n;
            }
            let dir = out_dir(&common, kind.as_str());
            let path = write_dataset(&generate(&spec)?, &spec, &dir)?;
            println!("wrote {count} records, manifest {}", path.display());
        }
        Command::IngestCheck { data } => {
            let ds = ingest_dataset(&data)?;
            println!(
                "dataset {}: {} records, {} classes",
                ds.name,
                ds.records.len(),
                ds.num_classes.max(2)
            );
            for s in Split::ALL {
                println!(
                    "  {:<9}{}",
                    s.as_str(),
                    ds.records.iter().filter(|r| r.split == s).count()
                );
            }
            println!("  L = {}", ds.base_l().unwrap_or(0));
            println!("  raw intensity mean {:.6}, std {:.6}", ds.stats.mean, ds.stats.std);
        }
        Command::Pretrain { data, resume, common } => {
            let cfg = load_config(&common)?;
            let ds = ingest_dataset(&data)?;
            let patch = cell_patch_size(&ds, &cfg)?;
            let out = pretrain(
                &unlabeled(&ds),
                &cfg,
                patch,
                &PretrainOptions {
                    out_dir: Some(out_dir(&common, "pretrain")),
                    resume_from: resume,
                    stop_after_steps: None,
                },
            )?;
            println!(
                "pretrained {} steps at view size {patch}; final loss {:.6}",
                out.step,
                out.losses.last().copied().unwrap_or(f64::NAN)
            );
            if let Some(c) = out.checkpoint {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Finetune {
            data,
            pretrained,
            common,
        } => {
            let cfg = load_config(&common)?;
            let ds = ingest_dataset(&data)?;
            let patch = cell_patch_size(&ds, &cfg)?;
            let encoder = pretrained.as_deref().map(load_pretrained_encoder).transpose()?;
            let init = match &encoder {
                Some(e) => EncoderInit::Pretrained(e),
                None => EncoderInit::Random,
            };
            let labeled = select_labeled_subset(&ds.split(Split::Train), cfg.label_fraction, cfg.seed)?;
            let out = finetune_segmentation(
                init,
                &labeled,
                &ds.split(Split::Val),
                &cfg,
                patch,
                &FinetuneOptions {
                    out_dir: Some(out_dir(&common, "finetune")),
                    num_classes: ds.num_classes,
                },
            )?;
            println!(
                "fine-tuned on {} labeled images, patch {patch}; best val Dice {:.4} at epoch {}",
                labeled.len(),
                out.best_val_dice.unwrap_or(f64::NAN),
                out.best_epoch
            );
        }
        Command::Evaluate {
            data,
            checkpoint,
            stride,
            cap,
            split,
            out,
        } => {
            let ds = ingest_dataset(&data)?;
            let model = load_segmentation_model(&checkpoint)?;
            let (h, _) = model.patch_size();
            let summary = evaluate_split(
                &model,
                &ds.split(parse_split(&split)?),
                stride.unwrap_or((h / 2).max(1)),
                cap,
            )?;
            println!(
                "{} records: mean Dice {:.4}, mean HD {:.3}",
                summary.records.len(),
                summary.mean_dice,
                summary.mean_hd
            );
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_vec_pretty(&summary)?)?;
            }
        }
        Command::Sweep { common, max_cells } => {
            let path = common
                .config
                .as_deref()
                .ok_or_else(|| HarnessError::Invalid("sweep needs --config".into()))?;
            let mut spec = SweepSpec::load(path)?;
            if let Some(o) = common.out {
                spec.output_dir = o;
            }
            if let Some(s) = common.seed {
                spec.axes.seed = vec![s];
            }
            let runs = run_sweep_with(
                &spec,
                &SweepOptions {
                    max_cells,
                    quiet: false,
                },
            )?;
            let done = runs.iter().filter(|r| r.status == RunStatus::Done).count();
            println!("{done}/{} cells done in {}", runs.len(), spec.output_dir.display());
            return Ok(done == runs.len());
        }
        Command::Report {
            runs,
            out,
            average_methods,
        } => {
            let records = load_runs(&runs)?;
            let files = emit_report(&records, out.as_deref().unwrap_or(Path::new(&runs)), average_methods)?;
            println!("wrote {}", files.markdown.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
