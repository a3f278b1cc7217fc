//! Cost-sensitive binary cross entropy and the baselines it is compared to.
//!
//! For scores `z`, one-hot targets `t`, positive weights `u` and the negative
//! weight row `v` selected by each example's true class `c(i)`:
//!
//! ```text
//! L = -(1/N) Σ_i Σ_j [ u_j t_ij log z_ij + v_{c(i),j} (1 - t_ij) log(1 - z_ij) ]
//! ```
//!
//! With `u = v = 1` this is the ordinary sigmoid binary cross entropy.

use ndarray::{Array2, ArrayView2, Axis};

use crate::cost_model::WeightPair;
use crate::error::{Error, Result};

/// Scores are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

/// Post-sigmoid scores, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    values: Array2<f64>,
}

impl ScoreBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::EmptyInput("score batch has no rows"));
        }
        if values.iter().any(|z| !(0.0..=1.0).contains(z)) {
            return Err(Error::InvalidConfig("scores must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    /// Applies the logistic function to pre-activations.
    pub fn from_logits(logits: ArrayView2<'_, f64>) -> Result<Self> {
        Self::new(logits.mapv(sigmoid))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// One-hot targets plus the class index of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    values: Array2<f64>,
    labels: Vec<usize>,
}

impl TargetBatch {
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("target batch has no rows"));
        }
        let mut values = Array2::zeros((labels.len(), num_classes));
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange { label, min: 0, max: num_classes.saturating_sub(1) });
            }
            values[[i, label]] = 1.0;
        }
        Ok(Self { values, labels: labels.to_vec() })
    }

    /// Validates an explicit one-hot matrix.
    pub fn from_one_hot(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::EmptyInput("target batch has no rows"));
        }
        let mut labels = Vec::with_capacity(values.nrows());
        for (row, r) in values.rows().into_iter().enumerate() {
            let ones: Vec<usize> = r.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(j, _)| j).collect();
            let zeros = r.iter().filter(|&&x| x == 0.0).count();
            if ones.len() != 1 || zeros + 1 != r.len() {
                return Err(Error::InvalidTarget { row });
            }
            labels.push(ones[0]);
        }
        Ok(Self { values, labels })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn nrows(&self) -> usize {
        self.labels.len()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(rows: usize, cols: usize, targets: &TargetBatch, weights: Option<&WeightPair>) -> Result<()> {
    if rows != targets.nrows() || cols != targets.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", targets.nrows(), targets.ncols()),
            found: format!("{rows}x{cols}"),
        });
    }
    if let Some(w) = weights {
        if w.num_classes() != cols {
            return Err(Error::ShapeMismatch {
                expected: format!("weights for {cols} classes"),
                found: format!("weights for {} classes", w.num_classes()),
            });
        }
    }
    Ok(())
}

/// Cost-sensitive BCE with the default clamp.
pub fn cs_bce_loss(scores: &ScoreBatch, targets: &TargetBatch, weights: &WeightPair) -> Result<f64> {
    cs_bce_loss_with_eps(scores, targets, weights, DEFAULT_CLAMP_EPS)
}

pub fn cs_bce_loss_with_eps(scores: &ScoreBatch, targets: &TargetBatch, weights: &WeightPair, eps: f64) -> Result<f64> {
    let z = scores.values();
    check_shapes(z.nrows(), z.ncols(), targets, Some(weights))?;
    let u = weights.positive();
    let mut total = 0.0;
    for (i, (zrow, trow)) in z.rows().into_iter().zip(targets.values().rows()).enumerate() {
        let v = weights.negative_for(targets.labels()[i]);
        let mut row_sum = 0.0;
        for j in 0..zrow.len() {
            let zij = zrow[j].clamp(eps, 1.0 - eps);
            let t = trow[j];
            row_sum += u[j] * t * zij.ln() + v[j] * (1.0 - t) * (1.0 - zij).ln();
        }
        total += row_sum;
    }
    Ok(-total / z.nrows() as f64)
}

/// Unweighted binary cross entropy, the `u = v = 1` special case.
pub fn bce_loss(scores: &ScoreBatch, targets: &TargetBatch) -> Result<f64> {
    cs_bce_loss(scores, targets, &WeightPair::uniform(scores.ncols()))
}

/// Gradient of the weighted loss with respect to the scores. Only used for
/// checking the logit-space gradient; training never goes through here.
pub fn cs_bce_grad_scores(scores: &ScoreBatch, targets: &TargetBatch, weights: &WeightPair) -> Result<Array2<f64>> {
    let z = scores.values();
    check_shapes(z.nrows(), z.ncols(), targets, Some(weights))?;
    let n = z.nrows() as f64;
    let u = weights.positive();
    let mut grad = Array2::zeros(z.raw_dim());
    for (i, mut grow) in grad.rows_mut().into_iter().enumerate() {
        let v = weights.negative_for(targets.labels()[i]);
        for j in 0..grow.len() {
            let zij = z[[i, j]].clamp(DEFAULT_CLAMP_EPS, 1.0 - DEFAULT_CLAMP_EPS);
            let t = targets.values()[[i, j]];
            grow[j] = -(u[j] * t / zij - v[j] * (1.0 - t) / (1.0 - zij)) / n;
        }
    }
    Ok(grad)
}

/// Gradient of the weighted loss with respect to the pre-activations, via
/// the sigmoid chain rule. No division by `z` or `1 - z` takes place.
pub fn cs_bce_grad_logits(
    logits: ArrayView2<'_, f64>,
    targets: &TargetBatch,
    weights: &WeightPair,
) -> Result<Array2<f64>> {
    check_shapes(logits.nrows(), logits.ncols(), targets, Some(weights))?;
    let n = logits.nrows() as f64;
    let u = weights.positive();
    let mut grad = logits.mapv(sigmoid);
    for (i, mut grow) in grad.rows_mut().into_iter().enumerate() {
        let label = targets.labels()[i];
        let v = weights.negative_for(label);
        for j in 0..grow.len() {
            let z = grow[j];
            let t = if j == label { 1.0 } else { 0.0 };
            grow[j] = -(u[j] * t * (1.0 - z) - v[j] * (1.0 - t) * z) / n;
        }
    }
    Ok(grad)
}

/// Loss value computed from pre-activations (sigmoid then clamp).
pub fn cs_bce_loss_from_logits(
    logits: ArrayView2<'_, f64>,
    targets: &TargetBatch,
    weights: &WeightPair,
    eps: f64,
) -> Result<f64> {
    let scores = ScoreBatch::from_logits(logits)?;
    cs_bce_loss_with_eps(&scores, targets, weights, eps)
}

/// Row-wise softmax with the usual max shift.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|a| (a - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Categorical cross entropy over `softmax(logits)`.
pub fn softmax_ce_loss(logits: ArrayView2<'_, f64>, targets: &TargetBatch) -> Result<f64> {
    check_shapes(logits.nrows(), logits.ncols(), targets, None)?;
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(targets.labels()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|a| (a - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[label];
    }
    Ok(total / logits.nrows() as f64)
}

/// `(softmax(logits) - T) / N`.
pub fn softmax_ce_grad(logits: ArrayView2<'_, f64>, targets: &TargetBatch) -> Result<Array2<f64>> {
    check_shapes(logits.nrows(), logits.ncols(), targets, None)?;
    let n = logits.nrows() as f64;
    let mut grad = softmax(logits);
    grad -= targets.values();
    grad /= n;
    Ok(grad)
}
