//! Linear diagnostic probes.
//!
//! Probes are trained by seeded mini-batch SGD with per-epoch shuffling,
//! either as one-vs-rest hinge classifiers (linear SVMs) or as multinomial
//! logistic regressions. A binary hinge probe keeps a single separating row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RepresentationMatrix;

/// Per-example class ids in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    values: Vec<usize>,
    class_count: usize,
    class_names: Option<Vec<String>>,
}

impl LabelVector {
    pub fn new(values: Vec<usize>, class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::input(format!(
                "class count must be at least 2, got {class_count}"
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v >= class_count) {
            return Err(Error::input(format!(
                "label {v} at example {i} is not below class count {class_count}"
            )));
        }
        Ok(Self {
            values,
            class_count,
            class_names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_count {
            return Err(Error::input(format!(
                "{} class names for {} classes",
                names.len(),
                self.class_count
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &v in &self.values {
            counts[v] += 1;
        }
        counts
    }

    pub fn distinct_classes(&self) -> usize {
        self.counts().iter().filter(|&&c| c > 0).count()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let values = indices
            .iter()
            .map(|&i| {
                self.values
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::input(format!("label index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            values,
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        })
    }
}

/// Fraction of examples in the most frequent class.
pub fn majority_baseline(y: &LabelVector) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::input("majority baseline of an empty label vector"));
    }
    let top = y.counts().into_iter().max().unwrap_or(0);
    Ok(top as f64 / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// One-vs-rest hinge loss (linear SVM).
    Hinge,
    /// Multinomial logistic (softmax cross-entropy).
    Logistic,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" | "svm" => Ok(LossKind::Hinge),
            "logistic" | "softmax" => Ok(LossKind::Logistic),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Initial step size; decays as `1/sqrt(epoch)`.
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            l2_penalty: 1e-4,
            batch_size: 32,
            seed: 0,
            loss: LossKind::Hinge,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.l2_penalty < 0.0 || !self.l2_penalty.is_finite() {
            return Err(Error::Config("l2_penalty must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// A trained linear classifier `Wx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Array2<f64>,
    bias: Array1<f64>,
    class_count: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    degenerate: bool,
}

impl LinearProbe {
    /// `weights` holds either one row per class or, for two classes, a
    /// single row whose positive side is class 1.
    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>, class_count: usize) -> Result<Self> {
        let rows = weights.nrows();
        let single = class_count == 2 && rows == 1;
        if !single && rows != class_count {
            return Err(Error::input(format!(
                "{rows} weight rows for {class_count} classes"
            )));
        }
        if bias.len() != rows {
            return Err(Error::dims("probe bias", rows, bias.len()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("probe parameters must be finite"));
        }
        let degenerate = weights.iter().all(|&w| w == 0.0);
        Ok(Self {
            weights,
            bias,
            class_count,
            train_accuracy: 0.0,
            eval_accuracy: None,
            degenerate,
        })
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// True when training left every weight row at zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn raw_scores(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    /// Predicted class per row; ties go to the lowest class id.
    pub fn predict(&self, x: &RepresentationMatrix) -> Result<Vec<usize>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("probe input", self.input_dim(), x.cols()));
        }
        let scores = self.raw_scores(x.view());
        if self.weights.nrows() == 1 {
            Ok(scores.column(0).iter().map(|&s| usize::from(s > 0.0)).collect())
        } else {
            Ok(scores.outer_iter().map(|row| argmax(row.iter().copied())).collect())
        }
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

pub(crate) fn accuracy(predicted: &[usize], y: &LabelVector) -> f64 {
    let hits = predicted
        .iter()
        .zip(y.values())
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / y.len() as f64
}

fn check_pair(x: &RepresentationMatrix, y: &LabelVector) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::dims("label count", x.rows(), y.len()));
    }
    Ok(())
}

/// Trains a linear probe on `(x, y)`. Deterministic in `(x, y, cfg)`.
pub fn train_probe(x: &RepresentationMatrix, y: &LabelVector, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    check_pair(x, y)?;
    if y.distinct_classes() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "only {} distinct class present",
            y.distinct_classes()
        )));
    }

    let classes = y.class_count();
    let rows = match cfg.loss {
        LossKind::Hinge if classes == 2 => 1,
        _ => classes,
    };
    let d = x.cols();
    let mut weights = Array2::<f64>::zeros((rows, d));
    let mut bias = Array1::<f64>::zeros(rows);

    let labels = y.values();
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = x.view();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate / (epoch as f64).sqrt();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = data.select(Axis(0), batch);
            let scores = xb.dot(&weights.t()) + &bias;
            let mut coef = Array2::<f64>::zeros((batch.len(), rows));
            let scale = 1.0 / batch.len() as f64;
            match cfg.loss {
                LossKind::Hinge => {
                    for (i, &ex) in batch.iter().enumerate() {
                        for r in 0..rows {
                            let target = if rows == 1 {
                                if labels[ex] == 1 { 1.0 } else { -1.0 }
                            } else if labels[ex] == r {
                                1.0
                            } else {
                                -1.0
                            };
                            if target * scores[[i, r]] < 1.0 {
                                coef[[i, r]] = -target * scale;
                            }
                        }
                    }
                }
                LossKind::Logistic => {
                    for (i, &ex) in batch.iter().enumerate() {
                        let row = scores.row(i);
                        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for r in 0..rows {
                            let target = if labels[ex] == r { 1.0 } else { 0.0 };
                            coef[[i, r]] = (exps[r] / total - target) * scale;
                        }
                    }
                }
            }
            let grad_w = coef.t().dot(&xb);
            let grad_b = coef.sum_axis(Axis(0));
            if cfg.l2_penalty > 0.0 {
                weights *= 1.0 - lr * cfg.l2_penalty;
            }
            weights.scaled_add(-lr, &grad_w);
            bias.scaled_add(-lr, &grad_b);
        }
    }

    let mut probe = LinearProbe::from_parts(weights, bias, classes)?;
    probe.train_accuracy = accuracy(&probe.predict(x)?, y);
    Ok(probe)
}

/// Fraction of rows whose argmax class score equals the label.
pub fn evaluate_probe(probe: &LinearProbe, x: &RepresentationMatrix, y: &LabelVector) -> Result<f64> {
    check_pair(x, y)?;
    Ok(accuracy(&probe.predict(x)?, y))
}

/// Nonzero weight rows of the probe, bias excluded.
pub fn probe_rowspace(probe: &LinearProbe) -> Result<Vec<Array1<f64>>> {
    let rows: Vec<Array1<f64>> = probe
        .weights
        .outer_iter()
        .filter(|r| r.iter().any(|&w| w != 0.0))
        .map(|r| r.to_owned())
        .collect();
    if rows.is_empty() {
        return Err(Error::DegenerateProbe);
    }
    Ok(rows)
}
