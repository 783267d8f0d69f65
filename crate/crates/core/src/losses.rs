//! Training objectives: reconstruction cross-entropy, centroid MMD, the
//! class-wise MMD used to align the two bottleneck spaces, and the head
//! losses. Every loss is generic over the float type so the same code can be
//! checked in f64 against finite differences and run in f32 during training.
//!
//! Reductions are means over samples; the reconstruction term sums over the
//! pixels of a sample first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::num_like::Scalar;
use crate::tensor::{mean_of_rows, squared_distance, Matrix};

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the class-wise MMD term in the target objective.
    pub beta: f64,
    /// Probabilities are clamped to `[epsilon, 1 - epsilon]` inside logarithms.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be a non-negative finite number, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1e-3), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// The two terms of the target objective, reported separately for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLossParts {
    pub reconstruction: f64,
    pub cws_mmd: f64,
}

/// Binary cross-entropy between inputs `x` in `[0,1]` and reconstruction
/// probabilities `p`, summed over features and averaged over samples.
pub fn reconstruction_bce<T: Scalar>(x: &Matrix<T>, p: &Matrix<T>, epsilon: f64) -> Result<T> {
    x.same_shape(p, "reconstruction_bce")?;
    if x.rows() == 0 {
        return Err(Error::EmptyInput("reconstruction batch"));
    }
    let lo = T::from_f64(epsilon);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (&xi, &pi) in x.as_slice().iter().zip(p.as_slice()) {
        let pc = pi.clamp_to(lo, hi);
        total = total - (xi * pc.ln() + (T::one() - xi) * (T::one() - pc).ln());
    }
    Ok(total / T::from_usize(x.rows()))
}

/// Gradient of [`reconstruction_bce`] with respect to `p`. Zero where the
/// clamp is active.
pub fn reconstruction_bce_grad<T: Scalar>(
    x: &Matrix<T>,
    p: &Matrix<T>,
    epsilon: f64,
) -> Result<Matrix<T>> {
    x.same_shape(p, "reconstruction_bce")?;
    if x.rows() == 0 {
        return Err(Error::EmptyInput("reconstruction batch"));
    }
    let lo = T::from_f64(epsilon);
    let hi = T::one() - lo;
    let inv_n = T::one() / T::from_usize(x.rows());
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for ((gi, &xi), &pi) in g.as_mut_slice().iter_mut().zip(x.as_slice()).zip(p.as_slice()) {
        if pi < lo || pi > hi {
            continue;
        }
        *gi = -(xi / pi - (T::one() - xi) / (T::one() - pi)) * inv_n;
    }
    Ok(g)
}

fn check_pair<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() == 0 {
        return Err(Error::EmptyInput("source features"));
    }
    if b.rows() == 0 {
        return Err(Error::EmptyInput("target features"));
    }
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Squared Euclidean distance between the two row centroids.
pub fn mmd_loss<T: Scalar>(source: &Matrix<T>, target: &Matrix<T>) -> Result<T> {
    check_pair(source, target)?;
    let ms = source.column_mean().expect("non-empty");
    let mt = target.column_mean().expect("non-empty");
    Ok(squared_distance(&ms, &mt))
}

/// Gradients of [`mmd_loss`] with respect to both feature matrices.
pub fn mmd_loss_grad<T: Scalar>(
    source: &Matrix<T>,
    target: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_pair(source, target)?;
    let all_s: Vec<usize> = vec![0; source.rows()];
    let all_t: Vec<usize> = vec![0; target.rows()];
    cws_mmd_loss_grad(source, &all_s, target, &all_t, 1)
}

/// Per-class centroids for labels in `[0, num_classes)`. Every class must be
/// present.
pub fn class_centroids<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
    side: &'static str,
) -> Result<(Vec<Vec<T>>, Vec<usize>)> {
    if labels.len() != features.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} {side} rows",
            labels.len(),
            features.rows()
        )));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        members[y].push(i);
    }
    let mut centroids = Vec::with_capacity(num_classes);
    let mut counts = Vec::with_capacity(num_classes);
    for (class, rows) in members.into_iter().enumerate() {
        counts.push(rows.len());
        let c = mean_of_rows(features, rows).ok_or(Error::MissingClass { class, side })?;
        centroids.push(c);
    }
    Ok((centroids, counts))
}

fn check_cws<T: Scalar>(source: &Matrix<T>, target: &Matrix<T>, num_classes: usize) -> Result<()> {
    check_pair(source, target)?;
    if num_classes == 0 {
        return Err(Error::InvalidConfig("num_classes must be positive".into()));
    }
    Ok(())
}

/// Class-wise MMD: the mean over classes of the squared distance between the
/// matching source and target class centroids.
pub fn cws_mmd_loss<T: Scalar>(
    source: &Matrix<T>,
    source_labels: &[usize],
    target: &Matrix<T>,
    target_labels: &[usize],
    num_classes: usize,
) -> Result<T> {
    check_cws(source, target, num_classes)?;
    let (cs, _) = class_centroids(source, source_labels, num_classes, "source")?;
    let (ct, _) = class_centroids(target, target_labels, num_classes, "target")?;
    let total = cs
        .iter()
        .zip(&ct)
        .fold(T::zero(), |acc, (a, b)| acc + squared_distance(a, b));
    Ok(total / T::from_usize(num_classes))
}

/// Gradients of [`cws_mmd_loss`] with respect to both feature matrices.
pub fn cws_mmd_loss_grad<T: Scalar>(
    source: &Matrix<T>,
    source_labels: &[usize],
    target: &Matrix<T>,
    target_labels: &[usize],
    num_classes: usize,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_cws(source, target, num_classes)?;
    let (cs, ns) = class_centroids(source, source_labels, num_classes, "source")?;
    let (ct, nt) = class_centroids(target, target_labels, num_classes, "target")?;
    let two_over_c = T::from_f64(2.0) / T::from_usize(num_classes);

    // d/dx of ||mu_s - mu_t||^2 is 2 (mu_s - mu_t) / n for every member.
    let diffs: Vec<Vec<T>> = cs
        .iter()
        .zip(&ct)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y) * two_over_c).collect())
        .collect();

    let mut gs = Matrix::zeros(source.rows(), source.cols());
    for (i, &y) in source_labels.iter().enumerate() {
        let scale = T::one() / T::from_usize(ns[y]);
        for (g, &d) in gs.row_mut(i).iter_mut().zip(&diffs[y]) {
            *g = d * scale;
        }
    }
    let mut gt = Matrix::zeros(target.rows(), target.cols());
    for (i, &y) in target_labels.iter().enumerate() {
        let scale = T::one() / T::from_usize(nt[y]);
        for (g, &d) in gt.row_mut(i).iter_mut().zip(&diffs[y]) {
            *g = -(d * scale);
        }
    }
    Ok((gs, gt))
}

/// Inputs of the target auto-encoder objective.
#[derive(Debug, Clone, Copy)]
pub struct TargetLossInputs<'a, T> {
    /// Target inputs in `[0,1]`.
    pub x: &'a Matrix<T>,
    /// Target reconstructions.
    pub p: &'a Matrix<T>,
    pub source_features: &'a Matrix<T>,
    pub source_labels: &'a [usize],
    pub target_features: &'a Matrix<T>,
    pub target_labels: &'a [usize],
    pub num_classes: usize,
}

/// `reconstruction_bce + beta * cws_mmd_loss`.
pub fn target_composite_loss<T: Scalar>(
    inputs: &TargetLossInputs<'_, T>,
    cfg: &LossConfig,
) -> Result<(T, TargetLossParts)> {
    cfg.validate()?;
    let rec = reconstruction_bce(inputs.x, inputs.p, cfg.epsilon)?;
    let cws = cws_mmd_loss(
        inputs.source_features,
        inputs.source_labels,
        inputs.target_features,
        inputs.target_labels,
        inputs.num_classes,
    )?;
    let total = rec + T::from_f64(cfg.beta) * cws;
    Ok((
        total,
        TargetLossParts {
            reconstruction: rec.to_f64(),
            cws_mmd: cws.to_f64(),
        },
    ))
}

/// Gradients of [`target_composite_loss`] with respect to the reconstruction,
/// the source features and the target features.
pub struct TargetLossGrad<T> {
    pub p: Matrix<T>,
    pub source_features: Matrix<T>,
    pub target_features: Matrix<T>,
}

pub fn target_composite_loss_grad<T: Scalar>(
    inputs: &TargetLossInputs<'_, T>,
    cfg: &LossConfig,
) -> Result<TargetLossGrad<T>> {
    cfg.validate()?;
    let p = reconstruction_bce_grad(inputs.x, inputs.p, cfg.epsilon)?;
    let (mut gs, mut gt) = cws_mmd_loss_grad(
        inputs.source_features,
        inputs.source_labels,
        inputs.target_features,
        inputs.target_labels,
        inputs.num_classes,
    )?;
    let beta = T::from_f64(cfg.beta);
    gs.as_mut_slice().iter_mut().for_each(|g| *g = *g * beta);
    gt.as_mut_slice().iter_mut().for_each(|g| *g = *g * beta);
    Ok(TargetLossGrad {
        p,
        source_features: gs,
        target_features: gt,
    })
}

const PROBABILITY_ROW_TOLERANCE: f64 = 1e-6;

/// Mean negative log-probability of the true class.
pub fn categorical_cross_entropy<T: Scalar>(
    labels: &[usize],
    probabilities: &Matrix<T>,
    epsilon: f64,
) -> Result<T> {
    if labels.len() != probabilities.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probabilities.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let lo = T::from_f64(epsilon);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (row, (&y, probs)) in labels.iter().zip(probabilities.iter_rows()).enumerate() {
        let sum: f64 = probs.iter().map(|p| p.to_f64()).sum();
        if (sum - 1.0).abs() > PROBABILITY_ROW_TOLERANCE || probs.iter().any(|&p| p < T::zero()) {
            return Err(Error::InvalidProbabilities { row, sum });
        }
        if y >= probs.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: probs.len(),
            });
        }
        total = total - probs[y].clamp_to(lo, hi).ln();
    }
    Ok(total / T::from_usize(labels.len()))
}

/// Mean squared residual.
pub fn mse_loss<T: Scalar>(y_true: &[T], y_pred: &[T]) -> Result<T> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("targets"));
    }
    let total = y_true
        .iter()
        .zip(y_pred)
        .fold(T::zero(), |acc, (&t, &p)| acc + (p - t) * (p - t));
    Ok(total / T::from_usize(y_true.len()))
}
