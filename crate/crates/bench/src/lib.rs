//! Shared fixtures for the benchmarks.

use cwcl_core::numerics::l2_normalize_rows;
use cwcl_core::{generate, Matrix, PairedDataset, Rng, SyntheticSpec};

/// `n` random unit rows of width `d`.
pub fn unit_batch(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    l2_normalize_rows(&Matrix::random_normal(n, d, 1.0, &mut rng)).expect("nonzero rows")
}

/// The default synthetic dataset.
pub fn default_dataset() -> PairedDataset {
    generate(&SyntheticSpec::default()).expect("default spec is valid")
}
