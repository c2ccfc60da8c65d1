//! Command-line driver for the shrinkage-attention segmentation library:
//! synthetic data generation, training, evaluation, gradient checking, the
//! threshold sweep and the ablation comparison.
//!
//! Every command is deterministic given its config and seed; environment
//! variables are never consulted. On failure the process prints a single
//! `error: ...` line to stderr and exits nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uesa_core::config::ConfigFile;
use uesa_core::data::{load_dataset, save_dataset, synth_dataset_with, GeneratorParams, Sample};
use uesa_core::gradcheck::gradient_suite;
use uesa_core::network::{load_checkpoint, save_checkpoint};
use uesa_core::train::{ablate, evaluate, sweep_threshold, train_with_progress, TrainConfig};

#[derive(Parser)]
#[command(name = "uesa", version, about = "Multidirectional shrinkage-attention segmentation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speckled-ellipse dataset as PGM files
    Synth {
        /// Output directory (images/ and masks/ are created inside)
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Square image side (power of two, >= 32)
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable texture, speckle and blur (clean two-level scenes)
        #[arg(long)]
        clean: bool,
    },
    /// Train a model and write the best-validation checkpoint
    Train {
        /// JSON config; missing keys take desk defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from `synth`; omitted = generate in memory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint.uesa and train_log.csv
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and emit the metric report CSV
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; omitted = the config's held-out split
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path; omitted = print to stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate over pooled pixel counts instead of per-image
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train one model per shrinkage threshold and tabulate the metrics
    SweepTh {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for sweep_th.csv
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model and both attention ablations
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for ablation.csv
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> uesa_core::Result<ConfigFile> {
    let mut cfg = match path {
        Some(p) => ConfigFile::from_path(p)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Dataset for a run: an on-disk directory when given, otherwise the
/// config's synthetic set.
fn resolve_data(cfg: &ConfigFile, data: &Option<PathBuf>) -> uesa_core::Result<Vec<Sample>> {
    match data {
        Some(dir) => load_dataset(dir),
        None => synth_dataset_with(
            cfg.samples,
            cfg.input_size,
            cfg.seed,
            &GeneratorParams::speckled(),
        ),
    }
}

fn run(command: Command) -> uesa_core::Result<()> {
    match command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            clean,
        } => {
            let params = if clean {
                GeneratorParams::clean()
            } else {
                GeneratorParams::speckled()
            };
            let samples = synth_dataset_with(count, size, seed, &params)?;
            save_dataset(&out, &samples)?;
            println!("wrote {count} samples of size {size} to {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let file = load_config(&config, seed)?;
            let cfg: TrainConfig = file.train_config()?;
            let samples = resolve_data(&file, &data)?;
            std::fs::create_dir_all(&out)?;
            let result = train_with_progress(&cfg, &samples, |log| {
                println!(
                    "epoch {:>3}  loss {:.6}  val_iou {:.4}",
                    log.epoch, log.mean_loss, log.val_iou
                );
            })?;
            let ckpt = out.join("checkpoint.uesa");
            save_checkpoint(&ckpt, &result.params)?;
            std::fs::write(out.join("train_log.csv"), result.log_csv())?;
            println!(
                "best val_iou {:.4} at epoch {}; checkpoint: {}",
                result.best_val_iou,
                result.best_epoch,
                ckpt.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            out,
            pooled,
            seed,
        } => {
            let file = load_config(&config, seed)?;
            let model_cfg = file.model_config();
            let params = load_checkpoint(&checkpoint, &model_cfg)?;
            let samples = match &data {
                Some(_) => resolve_data(&file, &data)?,
                None => {
                    // the held-out split of the config's synthetic dataset
                    let all = resolve_data(&file, &None)?;
                    let (_, val_idx) = uesa_core::train::split_dataset(
                        all.len(),
                        file.val_fraction,
                        file.seed,
                    );
                    val_idx.into_iter().map(|i| all[i].clone()).collect()
                }
            };
            let report = evaluate(&params, &model_cfg, &samples, pooled)?;
            let csv = report.to_csv();
            match out {
                Some(path) => {
                    write_report(&path, &csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
            println!(
                "aggregate: dsc {:.4} iou {:.4} sen {:.4} spec {:.4} acc {:.4}",
                report.mean.dsc, report.mean.iou, report.mean.sen, report.mean.spec, report.mean.acc
            );
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let items = gradient_suite(seed)?;
            let mut failures = 0;
            for item in &items {
                let status = if item.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:<4} {:<32} max_rel_error {:.3e} (tolerance {:.0e})",
                    item.name, item.max_rel_error, item.tolerance
                );
                if !item.passed() {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(uesa_core::Error::invalid(format!(
                    "{failures} gradient checks failed"
                )));
            }
            println!("{} gradient checks passed", items.len());
            Ok(())
        }
        Command::SweepTh {
            config,
            data,
            out,
            seed,
        } => {
            let file = load_config(&config, seed)?;
            let cfg = file.train_config()?;
            let samples = resolve_data(&file, &data)?;
            let report = sweep_threshold(&cfg, &[0.1, 0.2, 0.3, 0.4], &samples)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep_th.csv");
            std::fs::write(&path, report.to_csv())?;
            println!("{}", report.trend);
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            out,
            seed,
        } => {
            let file = load_config(&config, seed)?;
            let cfg = file.train_config()?;
            let samples = resolve_data(&file, &data)?;
            let report = ablate(&cfg, &samples)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("ablation.csv");
            std::fs::write(&path, report.to_csv())?;
            println!("{}", report.ordering);
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn write_report(path: &Path, csv: &str) -> uesa_core::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, csv)?;
    Ok(())
}
