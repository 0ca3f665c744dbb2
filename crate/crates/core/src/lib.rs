//! Probe-guided linear interventions on classifier input representations.
//!
//! The toolkit trains linear probes for an auxiliary feature, accumulates
//! their rowspaces by iterative nullspace projection, and feeds the
//! intervened representations back into a frozen classifier head:
//!
//! * **amnesic**: remove the accumulated span (`X - XQᵀQ`);
//! * **mnestic**: keep only the accumulated span (`XQᵀQ`);
//! * **controls**: the same projections with random directions.
//!
//! A synthetic generator plants natural-logic features (context
//! monotonicity, lexical relation, and their entailment composition) in
//! known subspaces so every intervention can be checked against ground truth.

pub mod error;
pub mod formats;
pub mod head;
pub mod intervention;
pub mod linalg;
pub mod pipeline;
pub mod probe;
pub mod synth;

pub use error::{Error, Result};
pub use head::{accuracy_delta, head_accuracy, head_predict, train_head, AccuracyDelta, Activation, ClassifierHead, Layer};
pub use intervention::{
    control_alignment_report, random_basis, run_inlp, stepwise_apply, InlpConfig, InterventionTrace, Mode,
    StepRecord,
};
pub use linalg::{
    amnesic_project, extend_basis, mnestic_project, subspace_alignment, AccumulatedBasis, AlignmentScore,
    RepresentationMatrix,
};
pub use probe::{
    evaluate_probe, majority_baseline, probe_rowspace, train_probe, LabelVector, LinearProbe, LossKind,
    ProbeConfig,
};
pub use synth::{
    entailment_label, generate, planted_subspace, Entailment, Feature, Monotonicity, NaturalLogicLabels,
    NliExample, Relation, SyntheticSpec,
};
pub use pipeline::{
    cmd_control, cmd_intervene, cmd_inlp, cmd_report, cmd_synth, DataSource, ExperimentConfig, HeadSource,
};
