use std::path::PathBuf;

use attnlab_core::calibration::FixtureModel;
use attnlab_core::schedule::WindowPreset;
use attnlab_core::verify::Suite;
use clap::{Parser, Subcommand};

use crate::config::{Format, Overrides};

#[derive(Debug, Parser)]
#[command(name = "attnlab", version, about = "Attention temperature laboratory: property checks, sweeps, calibration and a toy denoiser")]
pub struct Cli {
    /// JSON run config; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Step window preset: early, middle, late or all.
    #[arg(long, global = true)]
    pub preset: Option<WindowPreset>,
    /// Output directory; reports go to stdout when neither this, the config
    /// nor ATTNLAB_OUT_DIR names one.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a property suite: lemma1, lemma2, curvature, lipschitz, deviation or all.
    Verify {
        suite: Suite,
        /// Test hook that breaks every suite's kernel.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Entropy and curvature over an inverse-temperature grid.
    Sweep {
        /// Comma-separated logits; random draws otherwise.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        logits: Option<Vec<f64>>,
        /// Comma-separated alpha grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Foreground-ratio block calibration, or validation of a published block table.
    Calibrate {
        /// Check a published table (framepack, framepack_f1, wan2_1) instead.
        #[arg(long, value_name = "MODEL")]
        validate_fixture: Option<FixtureModel>,
        /// Block count for fixture validation; defaults to schedule.blocks.
        #[arg(long)]
        blocks: Option<usize>,
    },
    /// Toy denoising trajectory with the configured schedule, plus the conflict experiment.
    Simulate,
    /// Print the effective config as JSON.
    Config,
    /// ATNB tensor files.
    Tensor {
        #[command(subcommand)]
        op: TensorOp,
    },
}

#[derive(Debug, Subcommand)]
pub enum TensorOp {
    /// Header and value range of a tensor file.
    Info { path: PathBuf },
    /// Write a seeded random tensor.
    Random {
        path: PathBuf,
        /// Comma-separated dimensions, e.g. 2,3,4.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Boolean mask instead of reals.
        #[arg(long)]
        mask: bool,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            gamma: self.gamma,
            tau: self.tau,
            preset: self.preset,
            out: self.out.clone(),
            format: self.format,
        }
    }
}
