//! Fixtures shared by the benchmarks.

use degan_core::data::{generate_synthetic, Dataset};
use degan_core::models::ModelConfig;

/// Default architecture at the default 48x48 resolution, sized for
/// `n_identities` x `n_expressions` synthetic data.
pub fn model(n_identities: usize, n_expressions: usize) -> ModelConfig {
    ModelConfig { n_identities, n_expressions, ..ModelConfig::default() }
}

pub fn synthetic(n_identities: usize, n_expressions: usize, per_pair: usize) -> Dataset {
    generate_synthetic(n_identities, n_expressions, per_pair, 48, 0).expect("valid synthetic design").dataset
}
