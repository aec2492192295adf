use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Seed for a deterministic sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for stream `index` (splitmix64 finaliser).
    pub fn derive(self, index: u64) -> Seed {
        let mut z = self.0 ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// `rows x cols` matrix of i.i.d. `N(mean, std^2)` draws.
pub fn sample_gaussian<T: Scalar>(rows: usize, cols: usize, seed: Seed, mean: T, std: T) -> Result<Matrix<T>> {
    let mut rng = seed.rng();
    fill_gaussian(rows, cols, &mut rng, mean, std)
}

/// Same as [`sample_gaussian`] but drawing from a caller-owned generator.
pub fn fill_gaussian<T: Scalar, R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
    mean: T,
    std: T,
) -> Result<Matrix<T>> {
    if !(std >= T::zero()) || !std.is_finite() || !mean.is_finite() {
        return Err(invalid(format!("gaussian needs finite mean and std >= 0, got mean={mean}, std={std}")));
    }
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let data = (0..rows * cols)
        .map(|_| mean + std * T::lit(normal.sample(rng)))
        .collect();
    Ok(Matrix::from_raw(rows, cols, data))
}
