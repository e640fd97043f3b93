use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use speckle_lab::metrics::{ratio_image, ratio_kl, Provenance};
use speckle_lab::model::Checkpoint;
use speckle_lab::pipeline::dataset::sha256_file;
use speckle_lab::pipeline::{build_dataset, despeckle_image, evaluate_corpus, train, ExperimentConfig, Pairing};
use speckle_lab::speckle_sim::{apply_speckle, gamma_speckle_field, load_image, save_image, ImageFormat, SpeckleConfig};
use speckle_lab::{Error, Result};

const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Parser)]
#[command(name = "speckle-lab", version, about = "Speckle simulation, KL-regularized despeckling CNN and quality metrics")]
struct Cli {
    /// JSON experiment config; the desk profile is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the running command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of looks everywhere.
    #[arg(long, global = true)]
    looks: Option<u32>,
    /// Overrides the KL weight of the training loss.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multiply a clean image by a Gamma speckle field.
    Simulate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the speckle field itself.
        #[arg(long)]
        noise_out: Option<PathBuf>,
    },
    /// Cut and speckle training/validation patches from a clean corpus.
    BuildDataset {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the despeckling network on a built dataset.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Despeckle one image with a checkpoint.
    Despeckle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the ratio image.
        #[arg(long)]
        ratio_out: Option<PathBuf>,
    },
    /// Score a checkpoint on a paired or unpaired corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        pairing: PairingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratio image of a noisy/filtered pair and its KL to the Gamma law.
    Ratio {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        filtered: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    Paired,
    Unpaired,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(looks) = cli.looks {
        cfg.set_looks(looks);
    }
    if let Some(lambda) = cli.lambda {
        cfg.train.loss.lambda = lambda;
    }
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(EFFECTIVE_CONFIG);
    std::fs::write(&path, cfg.to_json()).map_err(|e| Error::Io { path, source: e })
}

fn save(path: &Path, image: &speckle_lab::speckle_sim::GrayImage) -> Result<()> {
    save_image(path, image, ImageFormat::from_path(path))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::Simulate { input, out, noise_out } => {
            let clean = load_image(&input)?;
            let speckle = SpeckleConfig::new(cfg.dataset.looks, cli.seed.unwrap_or(cfg.dataset.seed))?;
            let noise = gamma_speckle_field(speckle, clean.height(), clean.width())?;
            save(&out, &apply_speckle(&clean, &noise)?)?;
            if let Some(path) = noise_out {
                save(&path, &noise)?;
            }
        }
        Command::BuildDataset { input, out } => {
            write_echo(&out, &cfg)?;
            let m = build_dataset(&input, &cfg.dataset, &out)?;
            println!(
                "{} train / {} validation patches from {} sources ({} skipped)",
                m.train.count,
                m.validation.count,
                m.sources.len(),
                m.skipped.len()
            );
        }
        Command::Train { dataset, out } => {
            write_echo(&out, &cfg)?;
            let outcome = train(&dataset, &cfg.model, &cfg.train)?;
            outcome.write(&out)?;
            let r = &outcome.report;
            println!("input PSNR {:.3} dB", r.baseline.validation_psnr);
            for e in &r.epochs {
                println!(
                    "epoch {:>3}  train {:.6} (mse {:.6}, kl {:.5})  val {:.6}  psnr {:.3} dB  ratio-kl {:.5}",
                    e.epoch, e.train_total, e.train_mse, e.train_kl, e.validation_total, e.validation_psnr, e.validation_ratio_kl
                );
            }
            println!("best epoch {} in {:.1}s", r.best_epoch, outcome.wall_clock.as_secs_f64());
        }
        Command::Despeckle {
            checkpoint,
            input,
            out,
            ratio_out,
        } => {
            let ck = if cli.config.is_some() {
                Checkpoint::load_expecting(&checkpoint, &cfg.model)?
            } else {
                Checkpoint::load(&checkpoint)?
            };
            let floor = ratio_out.as_ref().map(|_| cfg.evaluation.histogram.division_floor);
            let result = despeckle_image(&ck.model, &load_image(&input)?, floor)?;
            save(&out, &result.filtered)?;
            if let (Some(path), Some(ratio)) = (ratio_out, result.ratio) {
                save(&path, &ratio)?;
            }
        }
        Command::Evaluate {
            checkpoint,
            input,
            pairing,
            out,
        } => {
            let ck = if cli.config.is_some() {
                Checkpoint::load_expecting(&checkpoint, &cfg.model)?
            } else {
                Checkpoint::load(&checkpoint)?
            };
            write_echo(&out, &cfg)?;
            let pairing = match pairing {
                PairingArg::Paired => Pairing::Paired,
                PairingArg::Unpaired => Pairing::Unpaired,
            };
            let provenance = Provenance {
                checkpoint_id: Some(sha256_file(&checkpoint)?),
                seed: Some(ck.meta.seed),
                ..Provenance::default()
            };
            let report = evaluate_corpus(&ck.model, &input, pairing, &cfg.evaluation, provenance)?;
            report.write(&out, "metrics")?;
            print!("{}", report.to_csv()?);
        }
        Command::Ratio { noisy, filtered, out } => {
            let ratio = ratio_image(
                &load_image(&noisy)?,
                &load_image(&filtered)?,
                cfg.evaluation.histogram.division_floor,
            )?;
            save(&out, &ratio)?;
            let kl = ratio_kl(&ratio, cfg.evaluation.looks, &cfg.evaluation.histogram)?;
            println!("ratio_kl {kl:.6} bits (L = {})", cfg.evaluation.looks);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("speckle-lab: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
