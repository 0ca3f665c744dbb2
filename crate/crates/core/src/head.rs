//! The frozen classifier head applied to original or intervened representations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RepresentationMatrix;
use crate::probe::{accuracy, argmax, LabelVector, ProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::input(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine map `W x + b` (`W` is `out × in`) followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t()) + &self.bias;
        if self.activation == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
        z
    }
}

/// A stack of affine layers ending in an identity-activated score layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    layers: Vec<Layer>,
}

impl ClassifierHead {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::input("classifier head needs at least one layer"))?;
        if last.activation != Activation::Identity {
            return Err(Error::input("final head layer must use the identity activation"));
        }
        if last.out_dim() < 2 {
            return Err(Error::input("classifier head needs at least 2 output classes"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::input(format!("layer {i} has an empty dimension")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::dims("head layer bias", layer.out_dim(), layer.bias.len()));
            }
            if layer
                .weights
                .iter()
                .chain(layer.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::input(format!("layer {i} has non-finite parameters")));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims("head layer chaining", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }

    pub fn scores(&self, x: &RepresentationMatrix) -> Result<Array2<f64>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("classifier head input", self.input_dim(), x.cols()));
        }
        let mut h = self.layers[0].forward(x.view());
        for layer in &self.layers[1..] {
            h = layer.forward(h.view());
        }
        Ok(h)
    }
}

/// Per-row argmax of the head's scores, ties toward the lowest class id.
pub fn head_predict(head: &ClassifierHead, x: &RepresentationMatrix) -> Result<LabelVector> {
    let scores = head.scores(x)?;
    let values = scores
        .outer_iter()
        .map(|row| argmax(row.iter().copied()))
        .collect();
    LabelVector::new(values, head.class_count())
}

pub fn head_accuracy(head: &ClassifierHead, x: &RepresentationMatrix, y: &LabelVector) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::dims("label count", x.rows(), y.len()));
    }
    let predicted = head_predict(head, x)?;
    Ok(accuracy(predicted.values(), y))
}

/// Trains a linear head (`hidden = None`) or a one-hidden-layer tanh head on
/// softmax cross-entropy by seeded mini-batch gradient descent. The loss kind
/// in `cfg` is ignored.
pub fn train_head(
    x: &RepresentationMatrix,
    y: &LabelVector,
    cfg: &ProbeConfig,
    hidden: Option<usize>,
) -> Result<ClassifierHead> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(Error::dims("label count", x.rows(), y.len()));
    }
    if y.distinct_classes() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "only {} distinct class present",
            y.distinct_classes()
        )));
    }
    if hidden == Some(0) {
        return Err(Error::input("hidden width must be positive"));
    }

    let d = x.cols();
    let classes = y.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut layers = Vec::new();
    if let Some(width) = hidden {
        let bound = (6.0 / (d + width) as f64).sqrt();
        let w1 = Array2::from_shape_fn((width, d), |_| rng.random_range(-bound..bound));
        layers.push(Layer {
            weights: w1,
            bias: Array1::zeros(width),
            activation: Activation::Tanh,
        });
    }
    let score_in = hidden.unwrap_or(d);
    layers.push(Layer {
        weights: Array2::zeros((classes, score_in)),
        bias: Array1::zeros(classes),
        activation: Activation::Identity,
    });

    let labels = y.values();
    let data = x.view();
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate / (epoch as f64).sqrt();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = data.select(Axis(0), batch);
            // Forward, keeping each layer's input.
            let mut inputs = vec![xb];
            for layer in &layers {
                let out = layer.forward(inputs.last().expect("non-empty").view());
                inputs.push(out);
            }
            let scores = inputs.pop().expect("score layer output");

            // Softmax cross-entropy gradient w.r.t. the scores.
            let scale = 1.0 / batch.len() as f64;
            let mut grad = Array2::<f64>::zeros(scores.raw_dim());
            for (i, &ex) in batch.iter().enumerate() {
                let row = scores.row(i);
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let total: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                for c in 0..classes {
                    let p = (row[c] - max).exp() / total;
                    let target = if labels[ex] == c { 1.0 } else { 0.0 };
                    grad[[i, c]] = (p - target) * scale;
                }
            }

            for (li, layer) in layers.iter_mut().enumerate().rev() {
                let input = &inputs[li];
                let grad_w = grad.t().dot(input);
                let grad_b = grad.sum_axis(Axis(0));
                if li > 0 {
                    // Back through this layer into the previous (tanh) layer.
                    let mut upstream = grad.dot(&layer.weights);
                    upstream.zip_mut_with(input, |g, &h| *g *= 1.0 - h * h);
                    grad = upstream;
                }
                if cfg.l2_penalty > 0.0 {
                    layer.weights *= 1.0 - lr * cfg.l2_penalty;
                }
                layer.weights.scaled_add(-lr, &grad_w);
                layer.bias.scaled_add(-lr, &grad_b);
            }
        }
    }
    ClassifierHead::new(layers)
}

/// Head accuracy before and after an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDelta {
    pub start: f64,
    pub after: f64,
    pub delta: f64,
}

impl AccuracyDelta {
    pub fn new(start: f64, after: f64) -> Self {
        Self {
            start,
            after,
            delta: after - start,
        }
    }
}

pub fn accuracy_delta(
    head: &ClassifierHead,
    before: &RepresentationMatrix,
    after: &RepresentationMatrix,
    y: &LabelVector,
) -> Result<AccuracyDelta> {
    if before.rows() != after.rows() {
        return Err(Error::dims("intervened row count", before.rows(), after.rows()));
    }
    Ok(AccuracyDelta::new(
        head_accuracy(head, before, y)?,
        head_accuracy(head, after, y)?,
    ))
}
