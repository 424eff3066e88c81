//! `lsap`: command-line entry point for the latent-space alignment toolkit.

mod commands;
mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsap_core::latent::Space;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lsap", version, about = "Latent-space alignment toolkit for GAN inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum Command {
    /// Print the effective configuration as JSON.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Initialize a generator checkpoint from the configured seed.
    InitGen {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the mean normalized style code.
    MeanCode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        k_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample latents and images from the generator.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed one image by latent optimization.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        mean_code: PathBuf,
        /// Target image: tensor file or 8-bit RGB PNG.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        space: Option<Space>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the W+ encoder.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        mean_code: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Embed one image with a trained encoder.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Also render the reconstruction.
        #[arg(long)]
        gen: Option<PathBuf>,
    },
    /// NSCD of every code in a code file.
    Nscd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        mean_code: PathBuf,
        /// Needed for z, w and wplus codes.
        #[arg(long)]
        gen: Option<PathBuf>,
    },
    /// Fit an edit direction for a toy attribute.
    FindDirection {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        attribute: Option<String>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply an edit direction to every code in a file.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        /// Also render the edited codes.
        #[arg(long)]
        gen: Option<PathBuf>,
    },
    /// Latent editing consistency on generated targets.
    Lec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
        #[arg(long)]
        n_targets: Option<usize>,
        /// Embed with this encoder; otherwise latent optimization is used.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Required without --encoder.
        #[arg(long)]
        mean_code: Option<PathBuf>,
    },
    /// Sweep the alignment weight and write the trend table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        mean_code: PathBuf,
        #[arg(long)]
        n_targets: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the property suite.
    Props {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        z_seeds: Option<usize>,
        #[arg(long)]
        z_steps: Option<usize>,
    },
    /// 2-D PCA projection of codes.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codes: PathBuf,
        /// Needed for z, w and wplus codes.
        #[arg(long)]
        gen: Option<PathBuf>,
    },
}

impl Command {
    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::PrintConfig { .. } => None,
            Command::InitGen { common }
            | Command::MeanCode { common, .. }
            | Command::Sample { common, .. }
            | Command::Invert { common, .. }
            | Command::TrainEncoder { common, .. }
            | Command::Encode { common, .. }
            | Command::Nscd { common, .. }
            | Command::FindDirection { common, .. }
            | Command::Edit { common, .. }
            | Command::Lec { common, .. }
            | Command::Ablate { common, .. }
            | Command::Props { common, .. }
            | Command::Project { common, .. } => Some(&common.out),
        }
    }
}

#[derive(Serialize)]
struct Diagnostic {
    status: &'static str,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<usize>,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LSAP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| lsap_core::Error::invalid(format!("LSAP_THREADS={:?} is not a count", v)))?;
        if n == 0 {
            anyhow::bail!(lsap_core::Error::invalid("LSAP_THREADS must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| commands::run(&cli.command));
    let err = match result {
        Ok(()) => return ExitCode::SUCCESS,
        Err(e) => e,
    };
    let core = err.chain().find_map(|e| e.downcast_ref::<lsap_core::Error>());
    eprintln!("error: {:#}", err);
    match core {
        Some(c) if c.is_numeric() => {
            if let Some(dir) = cli.command.out_dir() {
                let step = match c {
                    lsap_core::Error::Aborted { step, .. } => Some(*step),
                    _ => None,
                };
                let diag = Diagnostic {
                    status: "numeric_failure",
                    error: format!("{:#}", err),
                    step,
                };
                let mut out = files::Outputs::default();
                if out.json("diagnostic.json", &diag).and_then(|_| out.commit(dir)).is_err() {
                    eprintln!("error: could not write diagnostic.json");
                }
            }
            ExitCode::from(3)
        }
        _ => ExitCode::from(2),
    }
}
