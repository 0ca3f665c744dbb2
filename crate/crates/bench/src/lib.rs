//! Shared fixtures for the criterion benchmarks.

use amnesic_core::{generate, LabelVector, RepresentationMatrix, SyntheticSpec};
use amnesic_core::{planted_subspace, AccumulatedBasis, Feature};

/// Synthetic representations of the given shape with their monotonicity
/// labels and planted monotonicity basis.
pub fn fixture(n_examples: usize, dim: usize) -> (RepresentationMatrix, LabelVector, AccumulatedBasis) {
    let spec = SyntheticSpec {
        n_examples,
        dim,
        redundancy: 4,
        ..SyntheticSpec::default()
    };
    let (x, labels) = generate(&spec).expect("valid benchmark spec");
    let basis = planted_subspace(&spec, Feature::Monotonicity).expect("planted basis");
    (x, labels.labels(Feature::Monotonicity), basis)
}
