//! Source-only reference: a source auto-encoder and head trained without any
//! target data, applied to target samples resized to the source shape.

use super::stages::{encode_all, fit_head, train_autoencoder};
use super::{predict_with, EpochSink, Predictions, Stage, TrainingConfig};
use crate::datagen::{Dataset, Shape, Task};
use crate::error::{Error, Result};
use crate::model::{build_autoencoder, AutoencoderSpec, Head, HeadKind, TargetScaling};
use crate::seed;

/// Bilinear resize of every sample (half-pixel centers, edge clamped).
/// Channel counts must agree.
pub fn resize_bilinear(d: &Dataset, shape: Shape) -> Result<Dataset> {
    if d.shape.channels != shape.channels {
        return Err(Error::ShapeMismatch(format!(
            "cannot resize {} to {}: channel counts differ",
            d.shape, shape
        )));
    }
    if shape.is_empty() || d.shape.is_empty() {
        return Err(Error::ShapeMismatch("cannot resize empty images".into()));
    }
    let (h0, w0) = (d.shape.height, d.shape.width);
    let (h1, w1) = (shape.height, shape.width);
    let axis = |n0: usize, n1: usize| -> Vec<(usize, usize, f32)> {
        let scale = n0 as f64 / n1 as f64;
        (0..n1)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n0 - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n0 - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h0, h1), axis(w0, w1));
    let mut samples = Vec::with_capacity(d.len() * shape.len());
    for i in 0..d.len() {
        for plane in d.sample(i).chunks_exact(h0 * w0) {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let at = |y: usize, x: usize| plane[y * w0 + x];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    samples.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    Ok(Dataset {
        shape,
        samples,
        ..d.clone()
    })
}

/// Trains a source auto-encoder (reconstruction only) and a head on its
/// features, then predicts `target` after resizing it to the source shape.
pub fn run_source_only_baseline(
    source: &Dataset,
    target: &Dataset,
    task: Task,
    cfg: &TrainingConfig,
    sink: &mut dyn EpochSink,
) -> Result<Predictions> {
    cfg.validate()?;
    let classes = source.num_classes_present();
    let spec = AutoencoderSpec::new(source.shape, cfg.bottleneck_size);
    let mut ae = build_autoencoder(&spec, seed::derive(cfg.seed, &[seed::stream::INIT_SOURCE]))?;
    train_autoencoder(&mut ae, source, Stage::Autoencoders, cfg, sink)?;

    let mut head = Head::new(
        &cfg.head_spec(task, classes),
        seed::derive(cfg.seed, &[seed::stream::INIT_HEAD, Stage::Classifier.number() as u64]),
    )?;
    if head.kind() == HeadKind::LinearRegressor {
        let targets = source
            .targets
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("regression needs targets".into()))?;
        head.scaling = Some(TargetScaling::fit(targets));
    }
    let features = encode_all(&ae, source)?;
    fit_head(&mut head, &features, source, Stage::Classifier, cfg, sink)?;

    let resized = resize_bilinear(target, source.shape)?;
    predict_with(&resized, |chunk| head.predict(&ae.encode(chunk)?))
}
