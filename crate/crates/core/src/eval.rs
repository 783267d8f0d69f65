//! Metrics, the class-alignment diagnostic and the 2-D embedding export.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, GroundTruth, Task};
use crate::error::{Error, Result};
use crate::losses::class_centroids;
use crate::model::{AdaptationModel, HeadOutput};
use crate::pipeline::stages::encode_all;
use crate::tensor::{squared_distance, Matrix};

/// Accuracy and confusion matrix (rows = true class, columns = predicted).
pub fn classification_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&v| v >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    Ok((correct as f64 / y_true.len() as f64, confusion))
}

fn check_pairs(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true values but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    Ok(())
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pairs(y_true, y_pred)?;
    if y_true.len() < 2 {
        return Err(Error::EmptyInput("r_squared needs at least two values"));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("r_squared of constant targets"));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mean_squared_error(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pairs(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(Error::EmptyInput("values"));
    }
    Ok(y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / y_true.len() as f64)
}

/// Mean squared centroid distance between same-class and different-class
/// pairs across the two domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub matched: f64,
    pub mismatched: f64,
}

impl Alignment {
    pub fn ratio(&self) -> f64 {
        self.matched / self.mismatched
    }
}

/// Alignment measured directly on two labeled feature matrices.
pub fn alignment_from_features(
    source: &Matrix<f32>,
    source_labels: &[usize],
    target: &Matrix<f32>,
    target_labels: &[usize],
    num_classes: usize,
) -> Result<Alignment> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig("alignment needs at least two classes".into()));
    }
    if source.cols() != target.cols() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths differ: {} vs {}",
            source.cols(),
            target.cols()
        )));
    }
    let (cs, _) = class_centroids(&source.to_f64(), source_labels, num_classes, "source")?;
    let (ct, _) = class_centroids(&target.to_f64(), target_labels, num_classes, "target")?;
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for (k, a) in cs.iter().enumerate() {
        for (j, b) in ct.iter().enumerate() {
            let d = squared_distance(a, b);
            if k == j {
                matched += d;
            } else {
                mismatched += d;
            }
        }
    }
    let c = num_classes as f64;
    Ok(Alignment {
        matched: matched / c,
        mismatched: mismatched / (c * (c - 1.0)),
    })
}

/// Alignment of the model's source and target bottlenecks.
pub fn alignment_diagnostic(
    model: &AdaptationModel,
    source: &Dataset,
    target: &Dataset,
) -> Result<Alignment> {
    let c = source.num_classes_present().max(target.num_classes_present()).max(model.num_classes());
    alignment_from_features(
        &encode_all(model.source_ae(), source)?,
        source.labels()?,
        &encode_all(model.target_ae(), target)?,
        target.labels()?,
        c,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMethod {
    #[default]
    Linear2d,
}

impl std::str::FromStr for EmbeddingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-2d" => Ok(EmbeddingMethod::Linear2d),
            other => Err(Error::InvalidConfig(format!("unknown embedding method `{other}`"))),
        }
    }
}

/// 2-D coordinates with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub labels: Option<Vec<usize>>,
}

/// Projects rows onto their two leading principal directions. Each direction
/// is signed so that its first nonzero loading is positive.
pub fn project_linear_2d(features: &Matrix<f64>) -> Result<Vec<[f64; 2]>> {
    let (n, d) = (features.rows(), features.cols());
    if n < 3 {
        return Err(Error::EmptyInput("an embedding needs at least three samples"));
    }
    let mean = features.column_mean().expect("non-empty");
    let centered = DMatrix::from_fn(n, d, |i, j| features.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
            v.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (slot, axis) in p.iter_mut().zip(&axes) {
                *slot = centered.row(i).iter().zip(axis).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect())
}

/// Embeds the target-encoder bottleneck of `dataset`.
pub fn export_embedding(
    model: &AdaptationModel,
    dataset: &Dataset,
    method: EmbeddingMethod,
) -> Result<Embedding> {
    let features = encode_all(model.target_ae(), dataset)?;
    let coords = match method {
        EmbeddingMethod::Linear2d => project_linear_2d(&features.to_f64())?,
    };
    Ok(Embedding {
        coords,
        labels: dataset.labels.clone(),
    })
}

/// Mean distance between class centroids divided by the mean distance of
/// points to their own centroid.
pub fn cluster_separation(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch("one label per point is required".into()));
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let m = Matrix::from_vec(points.len(), 2, points.iter().flatten().copied().collect())?;
    let (centroids, _) = class_centroids(&m, labels, c, "embedding")?;
    let mut between = 0.0;
    let mut pairs = 0usize;
    for k in 0..c {
        for j in k + 1..c {
            between += squared_distance(&centroids[k], &centroids[j]).sqrt();
            pairs += 1;
        }
    }
    let within: f64 = points
        .iter()
        .zip(labels)
        .map(|(p, &y)| squared_distance(p, &centroids[y]).sqrt())
        .sum::<f64>()
        / points.len() as f64;
    if pairs == 0 || within == 0.0 {
        return Err(Error::Undefined("cluster separation"));
    }
    Ok(between / pairs as f64 / within)
}

/// Scalar metrics written to `report.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_squared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_discrepancy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mismatched_discrepancy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_separation: Option<f64>,
    #[serde(skip)]
    pub embedding: Option<Embedding>,
}

impl EvalReport {
    /// Accuracy for classification, R² for regression.
    pub fn headline(&self) -> Option<f64> {
        self.accuracy.or(self.r_squared)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Scores predictions against ground truth. Class predictions need a
/// classification truth and values need regression targets.
pub fn score_predictions(predictions: &HeadOutput, truth: &GroundTruth) -> Result<EvalReport> {
    let mismatch = |found: &str| Error::KindMismatch {
        expected: format!("predictions for a {} task", truth.task),
        found: found.into(),
    };
    let mut report = EvalReport {
        class_names: Some(truth.class_names.clone()),
        ..EvalReport::default()
    };
    match predictions {
        HeadOutput::Classes { labels, .. } => {
            if truth.task != Task::Classification {
                return Err(mismatch("class labels"));
            }
            let (accuracy, confusion) =
                classification_metrics(&truth.labels, labels, truth.class_names.len())?;
            report.num_samples = labels.len();
            report.accuracy = Some(accuracy);
            report.confusion = Some(confusion);
        }
        HeadOutput::Values(values) => {
            let targets = match (&truth.targets, truth.task) {
                (Some(t), Task::Regression) => t,
                _ => return Err(mismatch("regression values")),
            };
            report.num_samples = values.len();
            report.r_squared = Some(r_squared(targets, values)?);
            report.mse = Some(mean_squared_error(targets, values)?);
        }
    }
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// CSV with a `true\predicted` header row.
pub fn write_confusion_csv(confusion: &[Vec<usize>], class_names: &[String], path: &Path) -> Result<()> {
    let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
    let mut out = String::from("true\\predicted");
    for k in 0..confusion.len() {
        out.push(',');
        out.push_str(&name(k));
    }
    out.push('\n');
    for (k, row) in confusion.iter().enumerate() {
        out.push_str(&name(k));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// CSV with columns `x,y,label` (label empty when unknown).
pub fn write_embedding_csv(embedding: &Embedding, path: &Path) -> Result<()> {
    let mut out = String::from("x,y,label\n");
    for (i, [x, y]) in embedding.coords.iter().enumerate() {
        let label = embedding
            .labels
            .as_ref()
            .map_or(String::new(), |l| l[i].to_string());
        out.push_str(&format!("{x},{y},{label}\n"));
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let (acc, conf) = classification_metrics(&y, &y, 3).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(conf, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn constant_prediction_on_uniform_truth() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let (acc, conf) = classification_metrics(&y, &[0; 40], 4).unwrap();
        assert_eq!(acc, 0.25);
        assert!(conf.iter().all(|row| row[0] == 10));
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            classification_metrics(&[0, 4], &[0, 1], 4),
            Err(Error::LabelOutOfRange { label: 4, .. })
        ));
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((r_squared(&[0.0, 2.0, 4.0], &[0.0, 2.0, 3.0]).unwrap() - 0.875).abs() < 1e-12);
        assert!(matches!(r_squared(&[5.0, 5.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
    }

    fn features(rows: &[[f32; 2]]) -> Matrix<f32> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_domains_have_zero_matched_discrepancy() {
        let f = features(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 2.0]]);
        let l = [0, 0, 1, 1];
        let a = alignment_from_features(&f, &l, &f, &l, 2).unwrap();
        assert_eq!(a.matched, 0.0);
        assert_eq!(a.mismatched, 4.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        let f = features(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            alignment_from_features(&f, &[0, 1], &f, &[0, 0], 2),
            Err(Error::MissingClass { class: 1, .. })
        ));
    }

    #[test]
    fn projection_of_planar_data_preserves_distances() {
        let pts = [[1.0, 0.5], [-2.0, 1.0], [0.5, -1.0], [0.5, -0.5]];
        let mean = [0.0, 0.0];
        let m = Matrix::from_rows(&pts.iter().map(|p| vec![p[0] - mean[0], p[1] - mean[1]]).collect::<Vec<_>>())
            .unwrap();
        let out = project_linear_2d(&m).unwrap();
        assert_eq!(out.len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                let d_in = squared_distance(&pts[i], &pts[j]);
                let d_out = squared_distance(&out[i], &out[j]);
                assert!((d_in - d_out).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_needs_three_samples() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(project_linear_2d(&m).is_err());
    }

    #[test]
    fn leading_axis_sign_is_fixed() {
        let m = Matrix::from_rows(&[vec![-3.0, 0.1], vec![0.0, 0.0], vec![3.0, -0.1]]).unwrap();
        let flipped = m.map(|v| -v);
        let a = project_linear_2d(&m).unwrap();
        let b = project_linear_2d(&flipped).unwrap();
        // same axes; the data itself is mirrored
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] + q[0]).abs() < 1e-9);
        }
        assert!(a[2][0] > 0.0);
    }

    #[test]
    fn separation_prefers_tight_clusters() {
        let tight = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        let loose = [[0.0, 0.0], [2.0, 0.0], [5.0, 5.0], [7.0, 5.0]];
        let l = [0, 0, 1, 1];
        assert!(cluster_separation(&tight, &l).unwrap() > cluster_separation(&loose, &l).unwrap());
    }

    proptest! {
        #[test]
        fn accuracy_matches_mismatch_count(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let (acc, conf) = classification_metrics(&t, &p, 5).unwrap();
            let wrong = t.iter().zip(&p).filter(|(a, b)| a != b).count();
            prop_assert!((acc - (1.0 - wrong as f64 / t.len() as f64)).abs() < 1e-12);
            for k in 0..5 {
                prop_assert_eq!(conf[k].iter().sum::<usize>(), t.iter().filter(|&&y| y == k).count());
            }
        }

        #[test]
        fn r_squared_never_exceeds_one(
            y in prop::collection::vec(-50.0f64..50.0, 2..40),
            noise in prop::collection::vec(-5.0f64..5.0, 40),
        ) {
            prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-6));
            let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
            prop_assert!(r_squared(&y, &p).unwrap() <= 1.0);
        }

        #[test]
        fn alignment_is_symmetric(
            rows in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 6..30),
            other in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 6..30),
        ) {
            let a = features(&rows.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>());
            let b = features(&other.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>());
            let la: Vec<usize> = (0..a.rows()).map(|i| i % 3).collect();
            let lb: Vec<usize> = (0..b.rows()).map(|i| i % 3).collect();
            let ab = alignment_from_features(&a, &la, &b, &lb, 3).unwrap();
            let ba = alignment_from_features(&b, &lb, &a, &la, 3).unwrap();
            prop_assert!((ab.matched - ba.matched).abs() < 1e-9);
            prop_assert!((ab.mismatched - ba.mismatched).abs() < 1e-9);
        }
    }
}
