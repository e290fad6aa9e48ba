//! Random instances shared by the invariant checks and the test suites.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::PdMatrix;

/// `B Bᵀ / k + I/4` with standard normal `B`: well conditioned but with
/// substantial off-diagonal mass.
pub fn random_pd<R: Rng + ?Sized>(k: usize, rng: &mut R) -> PdMatrix {
    let b = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = &b * b.transpose() / k as f64 + DMatrix::identity(k, k) * 0.25;
    PdMatrix::from_matrix(m).expect("B Bᵀ + I/4 is positive definite")
}
