//! Dense numeric substrate: softmax, log-sum-exp, symmetric spectral norms,
//! PCA and seeded Gaussian sampling.

mod eigen;
mod matrix;
mod pca;
mod rng;
mod softmax;

pub use eigen::{
    spectral_norm, spectral_norm_power, spectral_norm_sym, symmetric_eigen, PowerEstimate, SymmetricEigen,
    POWER_MAX_ITER, POWER_TOL, SYMMETRY_TOL,
};
pub use matrix::Matrix;
pub use pca::{pca_top_k, Pca};
pub use rng::{fill_gaussian, sample_gaussian, Seed};
pub use softmax::{log_sum_exp, row_softmax, softmax, tempered_softmax};
#[allow(unused_imports)]
pub(crate) use softmax::softmax_unchecked;
