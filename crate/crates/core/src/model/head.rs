use serde::{Deserialize, Serialize};

use super::layers::{Activation, Dense, Network, Op};
use crate::error::{Error, Result};
use crate::losses;
use crate::seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SoftmaxClassifier,
    LinearRegressor,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::SoftmaxClassifier => "softmax_classifier",
            HeadKind::LinearRegressor => "linear_regressor",
        })
    }
}

/// Fully connected head: relu hidden layers, then either a softmax or a
/// single linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub input_size: usize,
    pub hidden_layers: Vec<usize>,
    pub output_size: usize,
}

impl HeadSpec {
    pub fn classifier(input_size: usize, num_classes: usize) -> Self {
        HeadSpec {
            kind: HeadKind::SoftmaxClassifier,
            input_size,
            hidden_layers: vec![64],
            output_size: num_classes,
        }
    }

    pub fn regressor(input_size: usize) -> Self {
        HeadSpec {
            kind: HeadKind::LinearRegressor,
            input_size,
            hidden_layers: vec![64],
            output_size: 1,
        }
    }

    /// Total number of dense layers (hidden plus output).
    pub fn depth(&self) -> usize {
        self.hidden_layers.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::InvalidConfig("head layer widths must be positive".into()));
        }
        match self.kind {
            HeadKind::SoftmaxClassifier if self.output_size < 2 => Err(Error::InvalidConfig(
                "a classifier head needs at least 2 outputs".into(),
            )),
            HeadKind::LinearRegressor if self.output_size != 1 => Err(Error::InvalidConfig(
                "a regressor head has exactly 1 output".into(),
            )),
            _ => Ok(()),
        }
    }

    pub(crate) fn network(&self) -> Network {
        let mut ops = Vec::with_capacity(self.depth());
        let mut width = self.input_size;
        for &h in &self.hidden_layers {
            ops.push(Op::Dense(
                Dense {
                    inputs: width,
                    outputs: h,
                },
                Activation::Relu,
            ));
            width = h;
        }
        ops.push(Op::Dense(
            Dense {
                inputs: width,
                outputs: self.output_size,
            },
            Activation::Identity,
        ));
        Network::new(ops)
    }
}

/// Affine map between regression targets and the standardized values the
/// head is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaling {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        TargetScaling { mean, std }
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn from_unit(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    spec: HeadSpec,
    network: Network,
    pub(crate) params: Vec<f32>,
    pub(crate) scaling: Option<TargetScaling>,
}

/// Supervision for one head batch.
#[derive(Debug, Clone, Copy)]
pub enum HeadTargets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

/// Output of the head for a batch of features.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Classes {
        labels: Vec<usize>,
        probabilities: Matrix<f32>,
    },
    Values(Vec<f64>),
}

fn softmax_rows(logits: &[f32], width: usize) -> Vec<f32> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl Head {
    pub fn new(spec: &HeadSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let network = spec.network();
        let params = network.init_params(&mut seed::rng(seed, &[]));
        Ok(Head {
            spec: spec.clone(),
            network,
            params,
            scaling: None,
        })
    }

    pub(crate) fn from_parts(
        spec: HeadSpec,
        params: Vec<f32>,
        scaling: Option<TargetScaling>,
    ) -> Result<Self> {
        spec.validate()?;
        let network = spec.network();
        if params.len() != network.num_params() {
            return Err(Error::CountMismatch {
                what: "head parameters".into(),
                expected: network.num_params(),
                found: params.len(),
            });
        }
        Ok(Head {
            spec,
            network,
            params,
            scaling,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn scaling(&self) -> Option<TargetScaling> {
        self.scaling
    }

    pub(crate) fn num_params(&self) -> usize {
        self.network.num_params()
    }

    fn check_features(&self, features: &Matrix<f32>) -> Result<()> {
        if features.cols() != self.spec.input_size {
            return Err(Error::ShapeMismatch(format!(
                "head expects width {}, got {}",
                self.spec.input_size,
                features.cols()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, features: &Matrix<f32>) -> Result<HeadOutput> {
        self.check_features(features)?;
        let trace = self
            .network
            .forward(&self.params, features.as_slice(), features.rows());
        let out = trace.last();
        Ok(match self.spec.kind {
            HeadKind::SoftmaxClassifier => {
                let width = self.spec.output_size;
                let probs = softmax_rows(out, width);
                let labels = probs.chunks_exact(width).map(argmax).collect();
                HeadOutput::Classes {
                    labels,
                    probabilities: Matrix::from_vec(features.rows(), width, probs)?,
                }
            }
            HeadKind::LinearRegressor => {
                let scaling = self.scaling.unwrap_or(TargetScaling { mean: 0.0, std: 1.0 });
                HeadOutput::Values(out.iter().map(|&v| scaling.from_unit(f64::from(v))).collect())
            }
        })
    }

    /// Batch loss (cross-entropy or standardized MSE) and its gradient with
    /// respect to the head parameters, accumulated into `grad`.
    pub(crate) fn loss_and_grad(
        &self,
        features: &Matrix<f32>,
        targets: HeadTargets<'_>,
        epsilon: f64,
        grad: Option<&mut [f32]>,
    ) -> Result<f64> {
        self.check_features(features)?;
        let n = features.rows();
        let trace = self.network.forward(&self.params, features.as_slice(), n);
        let out = trace.last();
        let (loss, out_grad) = match (self.spec.kind, targets) {
            (HeadKind::SoftmaxClassifier, HeadTargets::Classes(labels)) => {
                let width = self.spec.output_size;
                let probs = softmax_rows(out, width);
                let pm = Matrix::from_vec(n, width, probs)?;
                let loss = losses::categorical_cross_entropy(labels, &pm, epsilon)?;
                let mut g = pm.into_vec();
                let inv = 1.0 / n as f32;
                for (row, &y) in g.chunks_exact_mut(width).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                (f64::from(loss), g)
            }
            (HeadKind::LinearRegressor, HeadTargets::Values(values)) => {
                let scaling = self.scaling.ok_or_else(|| {
                    Error::StageOrder("regressor target scaling has not been fitted".into())
                })?;
                let unit: Vec<f64> = values.iter().map(|&v| scaling.to_unit(v)).collect();
                let pred: Vec<f64> = out.iter().map(|&v| f64::from(v)).collect();
                let loss = losses::mse_loss(&unit, &pred)?;
                let g = pred
                    .iter()
                    .zip(&unit)
                    .map(|(p, t)| (2.0 * (p - t) / n as f64) as f32)
                    .collect();
                (loss, g)
            }
            (kind, _) => {
                return Err(Error::KindMismatch {
                    expected: kind.to_string(),
                    found: match targets {
                        HeadTargets::Classes(_) => "class labels".into(),
                        HeadTargets::Values(_) => "regression targets".into(),
                    },
                })
            }
        };
        if let Some(grad) = grad {
            self.network.backward(
                &self.params,
                features.as_slice(),
                &trace,
                out_grad,
                false,
                grad,
                false,
            );
        }
        Ok(loss)
    }
}
