//! Iterative nullspace projection and the interventions built on it.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    amnesic_project, extend_basis, mnestic_project, subspace_alignment, AccumulatedBasis,
    AlignmentScore, RepresentationMatrix,
};
use crate::probe::{evaluate_probe, majority_baseline, probe_rowspace, train_probe, LabelVector, ProbeConfig};

/// How an intervention transforms representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Remove the probe-selected span.
    Amnesic,
    /// Keep only the probe-selected span.
    Mnestic,
    /// Remove a random span of matching size.
    ControlRemove,
    /// Keep only a random span of matching size.
    ControlKeep,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Amnesic, Mode::Mnestic, Mode::ControlRemove, Mode::ControlKeep];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Amnesic => "amnesic",
            Mode::Mnestic => "mnestic",
            Mode::ControlRemove => "control-remove",
            Mode::ControlKeep => "control-keep",
        }
    }

    /// True when the mode keeps the span rather than removing it.
    pub fn keeps_span(self) -> bool {
        matches!(self, Mode::Mnestic | Mode::ControlKeep)
    }

    pub fn is_control(self) -> bool {
        matches!(self, Mode::ControlRemove | Mode::ControlKeep)
    }

    pub fn project(self, x: &RepresentationMatrix, basis: &AccumulatedBasis) -> Result<RepresentationMatrix> {
        if self.keeps_span() {
            mnestic_project(x, basis)
        } else {
            amnesic_project(x, basis)
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpConfig {
    pub max_iters: usize,
    /// Accuracy tolerance above the majority baseline that counts as "at baseline".
    pub stop_margin: f64,
    /// Consecutive at-baseline probes required to stop.
    pub patience: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            stop_margin: 0.02,
            patience: 3,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl InlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.stop_margin.is_nan() || self.stop_margin < 0.0 {
            return Err(Error::Config("stop_margin must be non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub directions_added: usize,
    /// Cumulative direction count after this step.
    pub k: usize,
    /// Held-out accuracy of this step's probe, trained and evaluated on data
    /// projected with all earlier steps.
    pub probe_accuracy: f64,
    pub majority_baseline: f64,
    pub downstream_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionTrace {
    pub steps: Vec<StepRecord>,
    /// The loop ran out of iterations before the stop rule fired.
    pub max_iters_hit: bool,
}

impl InterventionTrace {
    pub fn final_k(&self) -> usize {
        self.steps.last().map_or(0, |s| s.k)
    }
}

/// Iterative nullspace projection.
///
/// Each iteration trains a fresh probe (seed `cfg.seed + step`) on the
/// training data with all accumulated directions removed and scores it on the
/// equally projected evaluation data. A probe scoring at most
/// `baseline + stop_margin` counts toward the stop rule and contributes no
/// directions; any other probe resets the count and its rowspace is appended
/// to the basis. The loop stops after `patience` consecutive at-baseline
/// probes.
pub fn run_inlp(
    x_train: &RepresentationMatrix,
    y_train: &LabelVector,
    x_eval: &RepresentationMatrix,
    y_eval: &LabelVector,
    cfg: &InlpConfig,
) -> Result<(AccumulatedBasis, InterventionTrace)> {
    cfg.validate()?;
    if x_train.cols() != x_eval.cols() {
        return Err(Error::dims("evaluation matrix", x_train.cols(), x_eval.cols()));
    }
    if x_eval.rows() != y_eval.len() {
        return Err(Error::dims("evaluation labels", x_eval.rows(), y_eval.len()));
    }
    if y_train.distinct_classes() < 2 {
        return Err(Error::DegenerateLabels(
            "training labels hold a single class".into(),
        ));
    }
    let dim = x_train.cols();
    let baseline = majority_baseline(y_eval)?;
    let threshold = baseline + cfg.stop_margin;

    let mut basis = AccumulatedBasis::empty(dim);
    let mut trace = InterventionTrace::default();
    let mut at_baseline = 0;

    for step in 0..cfg.max_iters {
        let train = amnesic_project(x_train, &basis)?;
        let eval = amnesic_project(x_eval, &basis)?;
        let probe_cfg = cfg.probe.with_seed(cfg.seed.wrapping_add(step as u64));
        let probe = train_probe(&train, y_train, &probe_cfg)?;
        let acc = evaluate_probe(&probe, &eval, y_eval)?;

        let mut added = 0;
        if acc <= threshold {
            at_baseline += 1;
        } else {
            at_baseline = 0;
            let before = basis.len();
            basis = extend_basis(&basis, &probe_rowspace(&probe)?)?;
            added = basis.len() - before;
        }
        trace.steps.push(StepRecord {
            step,
            directions_added: added,
            k: basis.len(),
            probe_accuracy: acc,
            majority_baseline: baseline,
            downstream_accuracy: None,
        });
        if at_baseline >= cfg.patience {
            return Ok((basis, trace));
        }
        if basis.len() >= dim {
            return Err(Error::Saturated {
                dim,
                partial: Box::new((basis, trace)),
            });
        }
    }
    trace.max_iters_hit = true;
    Ok((basis, trace))
}

/// `k` orthonormalized standard-Gaussian directions, one per step.
pub fn random_basis(dim: usize, k: usize, seed: u64) -> Result<AccumulatedBasis> {
    if k == 0 || k > dim {
        return Err(Error::input(format!(
            "random basis needs 1 <= k <= d, got k = {k}, d = {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = AccumulatedBasis::empty(dim);
    while basis.len() < k {
        let candidate: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        basis = extend_basis(&basis, &[candidate])?;
    }
    Ok(basis)
}

/// One projected matrix per step prefix: element `i` uses the directions of
/// steps `0..=i`. An empty basis yields an empty sequence.
pub fn stepwise_apply(
    x: &RepresentationMatrix,
    basis: &AccumulatedBasis,
    mode: Mode,
) -> Result<Vec<RepresentationMatrix>> {
    if x.cols() != basis.dim() {
        return Err(Error::dims("stepwise_apply", basis.dim(), x.cols()));
    }
    (1..=basis.step_count())
        .map(|steps| mode.project(x, &basis.prefix(steps)))
        .collect()
}

/// Mean alignment of each control basis's directions against the probe basis.
pub fn control_alignment_report(
    random_bases: &[AccumulatedBasis],
    probe_basis: &AccumulatedBasis,
) -> Result<Vec<AlignmentScore>> {
    random_bases
        .iter()
        .map(|rb| {
            if rb.dim() != probe_basis.dim() {
                return Err(Error::dims("control basis", probe_basis.dim(), rb.dim()));
            }
            if rb.is_empty() {
                return Err(Error::input("control basis has no directions"));
            }
            let total = (0..rb.len())
                .map(|i| subspace_alignment(rb.direction(i), probe_basis).map(AlignmentScore::value))
                .sum::<Result<f64>>()?;
            AlignmentScore::new((total / rb.len() as f64).clamp(0.0, 1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn axis_basis() -> AccumulatedBasis {
        let b = extend_basis(&AccumulatedBasis::empty(2), &[array![1.0, 0.0]]).unwrap();
        extend_basis(&b, &[array![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn stepwise_mnestic_accumulates() {
        let x = RepresentationMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let seq = stepwise_apply(&x, &axis_basis(), Mode::Mnestic).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq[0].view(), array![[3.0, 0.0]]);
        assert_eq!(seq[1].view(), array![[3.0, 4.0]]);
    }

    #[test]
    fn stepwise_amnesic_complements() {
        let x = RepresentationMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let seq = stepwise_apply(&x, &axis_basis(), Mode::Amnesic).unwrap();
        assert_eq!(seq[0].view(), array![[0.0, 4.0]]);
        assert_eq!(seq[1].view(), array![[0.0, 0.0]]);
    }

    #[test]
    fn stepwise_empty_basis_is_empty() {
        let x = RepresentationMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let seq = stepwise_apply(&x, &AccumulatedBasis::empty(2), Mode::Amnesic).unwrap();
        assert!(seq.is_empty());
        assert!(stepwise_apply(&x, &AccumulatedBasis::empty(3), Mode::Amnesic).is_err());
    }

    #[test]
    fn random_basis_contract() {
        let full = random_basis(5, 5, 9).unwrap();
        assert_eq!(full.len(), 5);
        assert_eq!(full.step_count(), 5);
        let x = RepresentationMatrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        let zeroed = amnesic_project(&x, &full).unwrap();
        assert!(zeroed.view().iter().all(|v| v.abs() < 1e-12));

        let a = random_basis(100, 1, 1).unwrap();
        let b = random_basis(100, 1, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, random_basis(100, 1, 1).unwrap());
        assert!(random_basis(3, 4, 0).is_err());
        assert!(random_basis(3, 0, 0).is_err());
    }

    #[test]
    fn alignment_report_extremes() {
        let probe = extend_basis(&AccumulatedBasis::empty(3), &[array![1.0, 0.0, 0.0]]).unwrap();
        let other = extend_basis(&AccumulatedBasis::empty(3), &[array![0.0, 0.0, 1.0]]).unwrap();
        let scores = control_alignment_report(&[probe.clone(), other], &probe).unwrap();
        assert_eq!(scores[0].value(), 1.0);
        assert_eq!(scores[1].value(), 0.0);
        let wrong = AccumulatedBasis::empty(4);
        assert!(control_alignment_report(&[wrong], &probe).is_err());
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn inlp_rejects_degenerate_labels() {
        let x = RepresentationMatrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]).unwrap();
        let y = LabelVector::new(vec![0, 0], 2).unwrap();
        assert!(matches!(
            run_inlp(&x, &y, &x, &y, &InlpConfig::default()),
            Err(Error::DegenerateLabels(_))
        ));
    }
}
