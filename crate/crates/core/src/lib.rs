//! Attention-temperature analysis toolkit: inverse-temperature scaling of
//! conditioning tokens, its entropy and curvature theory, block and step
//! scheduling, calibration, and a toy denoising pipeline that exercises it.
//!
//! Everything numeric is generic over [`Scalar`]; the `f64` aliases below are
//! what the command-line tool and the property suites run on.

pub mod analysis;
pub mod attention;
pub mod calibration;
mod error;
pub mod io;
pub mod numkernel;
mod scalar;
pub mod schedule;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use numkernel::Seed;
pub use scalar::{logistic, Scalar};

pub type Matrix64 = numkernel::Matrix<f64>;
pub type AttentionResult64 = attention::AttentionResult<f64>;
pub type ScheduleConfig64 = schedule::ScheduleConfig<f64>;
pub type ScalingMode64 = schedule::ScalingMode<f64>;
pub type CurvatureReport64 = analysis::CurvatureReport<f64>;
pub type EntropyReport64 = analysis::EntropyReport<f64>;
pub type LipschitzReport64 = analysis::LipschitzReport<f64>;
pub type GroupMassReport64 = analysis::GroupMassReport<f64>;
pub type SweepRow64 = analysis::SweepRow<f64>;
pub type LatentTensor64 = calibration::LatentTensor<f64>;
pub type ToyDenoiser64 = sim::ToyDenoiser<f64>;
pub type StepCoefficients64 = sim::StepCoefficients<f64>;
pub type Trajectory64 = sim::Trajectory<f64>;
pub type ConflictReport64 = sim::ConflictReport<f64>;
pub type DeviationReport64 = sim::DeviationReport<f64>;
