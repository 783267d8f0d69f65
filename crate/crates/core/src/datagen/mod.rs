//! Synthetic paired-modality data.
//!
//! Each class owns a latent vector. A sample draws a jittered copy of its
//! class latent and is rendered by a fixed, modality-specific nonlinear
//! renderer, then corrupted with Gaussian noise and clipped to `[0, 1]`. The
//! source and target renderers differ in output shape, basis patterns, mixing
//! matrix and nonlinearity, so the only thing the two modalities share is the
//! class structure of the latent space.

mod render;
mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use render::{Renderer, LATENT_DIM};
pub use store::{load_dataset, save_dataset};

/// Surface roughness in micrometres for sandpaper grits 120, 240, 320, 500
/// and 1000.
pub const ROUGHNESS_SCHEDULE_UM: [f64; 5] = [59.5, 30.0, 23.1, 15.1, 9.2];
pub const SANDPAPER_GRITS: [u32; 5] = [120, 240, 320, 500, 1000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetLabeled,
    TargetUnlabeled,
}

impl Split {
    /// Conventional directory name for a saved split.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetLabeled => "target_labeled",
            Split::TargetUnlabeled => "target_unlabeled",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Source => 0,
            Split::TargetLabeled => 1,
            Split::TargetUnlabeled => 2,
        }
    }
}

/// Image-like tensor shape. Serialized as `[height, width, channels]`;
/// sample data is stored channel-major (`c, h, w`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 3]> for Shape {
    fn from([height, width, channels]: [usize; 3]) -> Self {
        Shape::new(height, width, channels)
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.height, s.width, s.channels]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target_labeled: usize,
    pub samples_per_class_target_unlabeled: usize,
    pub source_shape: Shape,
    pub target_shape: Shape,
    pub noise_sigma_source: f64,
    pub noise_sigma_target: f64,
    /// Standard deviation of the per-sample latent perturbation.
    pub latent_jitter: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 4,
            samples_per_class_source: 500,
            samples_per_class_target_labeled: 10,
            samples_per_class_target_unlabeled: 250,
            source_shape: Shape::new(32, 32, 1),
            target_shape: Shape::new(16, 24, 1),
            noise_sigma_source: 0.05,
            noise_sigma_target: 0.15,
            latent_jitter: 0.35,
            task: Task::Classification,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// The sandpaper roughness setup: five grit classes with continuous
    /// roughness targets.
    pub fn regression() -> Self {
        DatasetConfig {
            num_classes: ROUGHNESS_SCHEDULE_UM.len(),
            task: Task::Regression,
            ..DatasetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return invalid(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("samples_per_class_source", self.samples_per_class_source),
            ("samples_per_class_target_labeled", self.samples_per_class_target_labeled),
            ("samples_per_class_target_unlabeled", self.samples_per_class_target_unlabeled),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be >= 1"));
            }
        }
        for (name, s) in [("source_shape", self.source_shape), ("target_shape", self.target_shape)] {
            if s.height == 0 || s.width == 0 || s.channels == 0 {
                return invalid(format!("{name} entries must be >= 1, got {s}"));
            }
        }
        for (name, v) in [
            ("noise_sigma_source", self.noise_sigma_source),
            ("noise_sigma_target", self.noise_sigma_target),
            ("latent_jitter", self.latent_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be a non-negative finite number"));
            }
        }
        if self.task == Task::Regression && self.num_classes > ROUGHNESS_SCHEDULE_UM.len() {
            return Err(Error::ScheduleSlots {
                slots: ROUGHNESS_SCHEDULE_UM.len(),
                requested: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.task {
            Task::Classification => (0..self.num_classes).map(|k| format!("class_{k}")).collect(),
            Task::Regression => SANDPAPER_GRITS[..self.num_classes]
                .iter()
                .map(|g| format!("grit_{g}"))
                .collect(),
        }
    }
}

/// A collection of same-shaped samples with optional labels and regression
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    /// `len() * shape.len()` values, sample-major, each sample `c, h, w`.
    pub samples: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub targets: Option<Vec<f64>>,
    pub split: Split,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.samples.len() / self.shape.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.shape.len();
        &self.samples[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::Unlabeled)
    }

    /// Number of samples per class for a labeled dataset.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0; num_classes];
        for &y in self.labels()? {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes,
                });
            }
            counts[y] += 1;
        }
        Ok(counts)
    }

    /// Largest label + 1, or 0 for an unlabeled or empty dataset.
    pub fn num_classes_present(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// A new dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut samples = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
        }
        Dataset {
            shape: self.shape,
            samples,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            targets: self
                .targets
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            split: self.split,
            class_names: self.class_names.clone(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch(format!("degenerate sample shape {}", self.shape)));
        }
        if !self.samples.len().is_multiple_of(self.shape.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a whole number of {} samples",
                self.samples.len(),
                self.shape
            )));
        }
        let n = self.len();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch(format!("{} labels for {n} samples", l.len())));
            }
        }
        if let Some(t) = &self.targets {
            if t.len() != n {
                return Err(Error::ShapeMismatch(format!("{} targets for {n} samples", t.len())));
            }
        }
        Ok(())
    }
}

/// Held-back answers for the unlabeled target split. Never handed to the
/// training pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub task: Task,
    pub labels: Vec<usize>,
    pub targets: Option<Vec<f64>>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedData {
    pub source: Dataset,
    pub target_labeled: Dataset,
    pub target_unlabeled: Dataset,
    pub truth: GroundTruth,
}

/// Renders all three splits from one configuration. A pure function of the
/// configuration, seed included.
pub fn generate_paired(config: &DatasetConfig) -> Result<PairedData> {
    config.validate()?;
    let latents = render::class_latents(config);
    let source_renderer = Renderer::source(config.source_shape, config.seed);
    let target_renderer = Renderer::target(config.target_shape, config.seed);
    let class_names = config.class_names();

    let make = |split: Split, per_class: usize, renderer: &Renderer, sigma: f64| {
        let n = per_class * config.num_classes;
        let labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
        let samples: Vec<f32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut rng = seed::rng(
                    config.seed,
                    &[seed::stream::SAMPLES, split.stream(), i as u64],
                );
                renderer.render(&latents[labels[i]], config.latent_jitter, sigma, &mut rng)
            })
            .collect();
        let targets = (config.task == Task::Regression)
            .then(|| labels.iter().map(|&k| ROUGHNESS_SCHEDULE_UM[k]).collect());
        Dataset {
            shape: renderer.shape(),
            samples,
            labels: Some(labels),
            targets,
            split,
            class_names: Some(class_names.clone()),
        }
    };

    let source = make(
        Split::Source,
        config.samples_per_class_source,
        &source_renderer,
        config.noise_sigma_source,
    );
    let target_labeled = make(
        Split::TargetLabeled,
        config.samples_per_class_target_labeled,
        &target_renderer,
        config.noise_sigma_target,
    );
    let mut target_unlabeled = make(
        Split::TargetUnlabeled,
        config.samples_per_class_target_unlabeled,
        &target_renderer,
        config.noise_sigma_target,
    );
    let truth = GroundTruth {
        task: config.task,
        labels: target_unlabeled.labels.take().expect("generated with labels"),
        targets: target_unlabeled.targets.take(),
        class_names,
    };
    Ok(PairedData {
        source,
        target_labeled,
        target_unlabeled,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            samples_per_class_source: 20,
            samples_per_class_target_labeled: 3,
            samples_per_class_target_unlabeled: 5,
            seed,
            ..DatasetConfig::default()
        }
    }

    /// Nearest-centroid accuracy computed with plain loops.
    fn nearest_centroid_accuracy(d: &Dataset, num_classes: usize) -> f64 {
        let dim = d.shape.len();
        let labels = d.labels.as_ref().unwrap();
        let mut cent = vec![vec![0.0f64; dim]; num_classes];
        let mut count = vec![0usize; num_classes];
        for i in 0..d.len() {
            for (c, &v) in cent[labels[i]].iter_mut().zip(d.sample(i)) {
                *c += f64::from(v);
            }
            count[labels[i]] += 1;
        }
        for (c, n) in cent.iter_mut().zip(&count) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut hits = 0;
        for i in 0..d.len() {
            let best = (0..num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = cent[a].iter().zip(d.sample(i)).map(|(c, &v)| (c - f64::from(v)).powi(2)).sum();
                    let db: f64 = cent[b].iter().zip(d.sample(i)).map(|(c, &v)| (c - f64::from(v)).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            hits += usize::from(best == labels[i]);
        }
        hits as f64 / d.len() as f64
    }

    #[test]
    fn zero_noise_zero_jitter_makes_classes_constant() {
        let cfg = DatasetConfig {
            noise_sigma_source: 0.0,
            noise_sigma_target: 0.0,
            latent_jitter: 0.0,
            ..small(3)
        };
        let data = generate_paired(&cfg).unwrap();
        for d in [&data.source, &data.target_labeled] {
            let labels = d.labels.as_ref().unwrap();
            for i in 0..d.len() {
                let first = labels.iter().position(|&y| y == labels[i]).unwrap();
                assert_eq!(d.sample(i), d.sample(first));
            }
        }
    }

    #[test]
    fn regression_targets_follow_roughness_schedule() {
        let cfg = DatasetConfig {
            samples_per_class_source: 2,
            samples_per_class_target_unlabeled: 2,
            seed: 1,
            ..DatasetConfig::regression()
        };
        let data = generate_paired(&cfg).unwrap();
        let labels = data.source.labels.as_ref().unwrap();
        let targets = data.source.targets.as_ref().unwrap();
        for (&y, &t) in labels.iter().zip(targets) {
            assert_eq!(t, [59.5, 30.0, 23.1, 15.1, 9.2][y]);
        }
        assert_eq!(data.truth.targets.as_ref().unwrap().len(), data.target_unlabeled.len());
        assert_eq!(data.source.class_names.as_ref().unwrap()[0], "grit_120");
    }

    #[test]
    fn regression_rejects_too_many_classes() {
        let cfg = DatasetConfig {
            num_classes: 6,
            ..DatasetConfig::regression()
        };
        assert!(matches!(
            generate_paired(&cfg),
            Err(Error::ScheduleSlots { slots: 5, requested: 6 })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_paired(&small(9)).unwrap();
        let b = generate_paired(&small(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_paired(&small(10)).unwrap();
        assert_ne!(a.source.samples, c.source.samples);
    }

    #[test]
    fn values_are_clipped_and_unlabeled_split_hides_truth() {
        let data = generate_paired(&small(4)).unwrap();
        for d in [&data.source, &data.target_labeled, &data.target_unlabeled] {
            assert!(d.samples.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(data.target_unlabeled.labels.is_none());
        assert!(data.target_unlabeled.targets.is_none());
        assert_eq!(data.truth.labels.len(), data.target_unlabeled.len());
        assert_eq!(data.source.shape, Shape::new(32, 32, 1));
        assert_eq!(data.target_labeled.shape, Shape::new(16, 24, 1));
    }

    #[test]
    fn noiseless_classes_are_nearest_centroid_separable() {
        for seed in 0..20 {
            for num_classes in [2, 4, 8] {
                let cfg = DatasetConfig {
                    num_classes,
                    noise_sigma_source: 0.0,
                    noise_sigma_target: 0.0,
                    latent_jitter: 0.0,
                    ..small(seed)
                };
                let data = generate_paired(&cfg).unwrap();
                assert_eq!(nearest_centroid_accuracy(&data.source, num_classes), 1.0, "seed {seed}");
                assert_eq!(nearest_centroid_accuracy(&data.target_labeled, num_classes), 1.0, "seed {seed}");
            }
        }
    }

    #[test]
    fn jittered_classes_stay_mostly_separable() {
        for seed in 0..10 {
            let cfg = DatasetConfig {
                noise_sigma_source: 0.0,
                noise_sigma_target: 0.0,
                ..small(seed)
            };
            let data = generate_paired(&cfg).unwrap();
            assert!(nearest_centroid_accuracy(&data.source, 4) >= 0.9, "seed {seed}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            DatasetConfig { num_classes: 1, ..small(0) },
            DatasetConfig { samples_per_class_source: 0, ..small(0) },
            DatasetConfig { target_shape: Shape::new(0, 4, 1), ..small(0) },
            DatasetConfig { noise_sigma_target: -1.0, ..small(0) },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}
