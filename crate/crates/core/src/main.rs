use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pseudopet::config::RunConfig;
use pseudopet::pipeline;
use pseudopet::Result;

#[derive(Parser)]
#[command(name = "pseudopet", version, about = "Pseudo-normal PET synthesis and hypometabolism localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training, test and patient phantoms.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Replace an existing data directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the configured model, optionally resuming from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthesize pseudo-normal PET for the test and patient sets.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Z-score localization of every patient.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Directory of pseudo-normal patient images.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Image-quality metrics on the test set.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Directory of pseudo-normal test images.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// All stages in order.
    All {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common, force } => {
            let cfg = load_config(&common)?;
            let st = pipeline::cmd_phantom(&cfg, force)?;
            println!("wrote {} files to {}", st.outputs.len(), cfg.out_dir.join("data").display());
        }
        Command::Train { common, checkpoint } => {
            let cfg = load_config(&common)?;
            pipeline::cmd_train(&cfg, checkpoint.as_deref())?;
            println!("checkpoint {}", cfg.out_dir.join(pipeline::CHECKPOINT_PATH).display());
        }
        Command::Synthesize { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let st = pipeline::cmd_synthesize(&cfg, checkpoint.as_deref())?;
            println!("synthesized {} images", st.outputs.len());
        }
        Command::Localize { common, pseudo } => {
            let cfg = load_config(&common)?;
            let (_, s) = pipeline::cmd_localize(&cfg, pseudo.as_deref())?;
            println!(
                "detection_rate {:.4} localization_accuracy {:.4} ({} of {} detected)",
                s.detection_rate, s.localization_accuracy, s.n_detected, s.n_patients
            );
        }
        Command::Metrics { common, pseudo } => {
            let cfg = load_config(&common)?;
            let (_, m) = pipeline::cmd_metrics(&cfg, pseudo.as_deref())?;
            println!("mean_ssim {:.4} fid {:.4}", m.mean_ssim, m.fid);
        }
        Command::All { common, force } => {
            let cfg = load_config(&common)?;
            let s = pipeline::run_all(&cfg, force)?;
            println!("mean_ssim {:.4} fid {:.4}", s.metrics.mean_ssim, s.metrics.fid);
            println!(
                "detection_rate {:.4} localization_accuracy {:.4}",
                s.cohort.detection_rate, s.cohort.localization_accuracy
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
