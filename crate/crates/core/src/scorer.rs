//! Logistic anomaly scorer trained on a single layer's hidden states.
//!
//! Features are standardized with training-set statistics stored in the
//! model, then a regularized binary cross-entropy is minimized with L-BFGS
//! starting from zero weights.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::ProbeSet;
use crate::error::{Error, Result};
use crate::optim::{self, LbfgsConfig, Objective};

/// Lower bound on stored per-dimension feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub l2_lambda: f64,
    pub history_size: usize,
    /// Recorded with the model; the optimizer itself is deterministic.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            l2_lambda: 1e-4,
            history_size: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "l2_lambda must be finite and non-negative, got {}",
                self.l2_lambda
            )));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance < 0.0 {
            return Err(Error::InvalidArgument(
                "gradient_tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub layer_index: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub trained_on: usize,
    pub final_loss: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub config: TrainConfig,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_problem(w: &[f64], features: ArrayView2<'_, f64>, labels: &[f64]) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if features.ncols() != w.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} features",
            w.len(),
            features.ncols()
        )));
    }
    if labels.len() != features.nrows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            features.nrows()
        )));
    }
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label {} at sample {i} is not 0 or 1",
            labels[i]
        )));
    }
    Ok(())
}

fn logit(w: &[f64], b: f64, row: ndarray::ArrayView1<'_, f64>) -> f64 {
    row.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b
}

fn loss_and_gradient(
    w: &[f64],
    b: f64,
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    l2_lambda: f64,
    grad_w: &mut [f64],
) -> (f64, f64) {
    let n = features.nrows() as f64;
    grad_w.iter_mut().for_each(|g| *g = 0.0);
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (row, &y) in features.rows().into_iter().zip(labels) {
        let p = sigmoid(logit(w, b, row));
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let r = p - y;
        grad_w.iter_mut().zip(row).for_each(|(g, x)| *g += r * x);
        grad_b += r;
    }
    let penalty = 0.5 * l2_lambda * w.iter().map(|v| v * v).sum::<f64>();
    grad_w
        .iter_mut()
        .zip(w)
        .for_each(|(g, w)| *g = *g / n + l2_lambda * w);
    (loss / n + penalty, grad_b / n)
}

/// Mean binary cross-entropy of `sigmoid(w.h + b)` plus `l2_lambda/2 * |w|^2`.
pub fn bce_loss(
    w: &[f64],
    b: f64,
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    l2_lambda: f64,
) -> Result<f64> {
    check_problem(w, features, labels)?;
    let mut scratch = vec![0.0; w.len()];
    Ok(loss_and_gradient(w, b, features, labels, l2_lambda, &mut scratch).0)
}

/// Analytic gradient of [`bce_loss`] with respect to `(w, b)`.
pub fn bce_gradient(
    w: &[f64],
    b: f64,
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    l2_lambda: f64,
) -> Result<(Vec<f64>, f64)> {
    check_problem(w, features, labels)?;
    let mut grad_w = vec![0.0; w.len()];
    let (_, grad_b) = loss_and_gradient(w, b, features, labels, l2_lambda, &mut grad_w);
    Ok((grad_w, grad_b))
}

struct BceObjective<'a> {
    features: ArrayView2<'a, f64>,
    labels: &'a [f64],
    l2_lambda: f64,
}

impl Objective for BceObjective<'_> {
    fn dim(&self) -> usize {
        self.features.ncols() + 1
    }

    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.features.ncols();
        let (loss, grad_b) = loss_and_gradient(
            &x[..d],
            x[d],
            self.features,
            self.labels,
            self.l2_lambda,
            &mut grad[..d],
        );
        grad[d] = grad_b;
        loss
    }
}

/// Per-column mean and floored population standard deviation.
pub fn feature_moments(features: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = features.nrows() as f64;
    features
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt().max(STD_FLOOR))
        })
        .unzip()
}

/// Trains a scorer on an `N x D` feature matrix with 0/1 labels and
/// returns it together with the loss after every accepted optimizer step.
pub fn train_traced(
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    layer_index: usize,
    config: &TrainConfig,
) -> Result<(ScorerModel, Vec<f64>)> {
    config.validate()?;
    check_problem(&vec![0.0; features.ncols()], features, labels)?;
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            record: (pos / features.ncols().max(1)) as u64,
            reason: "non-finite feature".into(),
        });
    }
    let n_anomalous = labels.iter().filter(|&&y| y == 1.0).count();
    if n_anomalous == 0 {
        return Err(Error::SingleClass("normal"));
    }
    if n_anomalous == labels.len() {
        return Err(Error::SingleClass("anomalous"));
    }
    if labels.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 4 samples, got {}",
            labels.len()
        )));
    }

    let (feature_mean, feature_std) = feature_moments(features);
    let standardized = Array2::from_shape_fn(features.dim(), |(i, j)| {
        (features[(i, j)] - feature_mean[j]) / feature_std[j]
    });
    let objective = BceObjective {
        features: standardized.view(),
        labels,
        l2_lambda: config.l2_lambda,
    };
    let outcome = optim::minimize(
        &objective,
        vec![0.0; features.ncols() + 1],
        &LbfgsConfig {
            max_iterations: config.max_iterations,
            gradient_tolerance: config.gradient_tolerance,
            history_size: config.history_size,
        },
    );
    let d = features.ncols();
    let model = ScorerModel {
        layer_index,
        weights: outcome.x[..d].to_vec(),
        bias: outcome.x[d],
        feature_mean,
        feature_std,
        trained_on: labels.len(),
        final_loss: outcome.value,
        iterations: outcome.iterations,
        gradient_norm: outcome.gradient_norm,
        converged: outcome.converged,
        config: *config,
    };
    model.validate()?;
    Ok((model, outcome.trace))
}

pub fn train(
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    layer_index: usize,
    config: &TrainConfig,
) -> Result<ScorerModel> {
    train_traced(features, labels, layer_index, config).map(|(m, _)| m)
}

/// Trains on one layer of a probing set.
pub fn train_on_layer(set: &ProbeSet, layer: usize, config: &TrainConfig) -> Result<ScorerModel> {
    let rows = set.layer_rows(layer)?;
    train(rows.view(), &set.targets(), layer, config)
}

impl ScorerModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if self.feature_mean.len() != d || self.feature_std.len() != d {
            return Err(Error::Dimension(format!(
                "model has {d} weights, {} means, {} stds",
                self.feature_mean.len(),
                self.feature_std.len()
            )));
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.feature_mean)
            .chain(&self.feature_std)
            .chain(std::iter::once(&self.bias))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("model parameters must be finite".into()));
        }
        if self.feature_std.iter().any(|&s| s < STD_FLOOR) {
            return Err(Error::Format(format!("feature_std below {STD_FLOOR}")));
        }
        Ok(())
    }

    pub fn logit(&self, vector: &[f64]) -> Result<f64> {
        if vector.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.dim(),
                vector.len()
            )));
        }
        Ok(vector
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict_proba(&self, vector: &[f32]) -> Result<f64> {
        let v: Vec<f64> = vector.iter().map(|&x| x as f64).collect();
        self.predict_proba_f64(&v)
    }

    pub fn predict_proba_f64(&self, vector: &[f64]) -> Result<f64> {
        self.logit(vector).map(sigmoid)
    }

    /// Same model with the decision flipped.
    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| -w).collect(),
            bias: -self.bias,
            ..self.clone()
        }
    }
}
