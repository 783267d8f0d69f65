//! The staged training procedure.
//!
//! 1. Match per-class counts between the source and labeled target sets and
//!    sort both by class.
//! 2. Train both auto-encoders together: source reconstruction loss plus
//!    target reconstruction loss plus `beta` times the class-wise MMD between
//!    the paired bottleneck batches, one optimizer step per batch pair.
//! 3. Freeze the source encoder and fit a fresh head on its features.
//! 4. Freeze the target encoder and fine-tune the head on the labeled target
//!    features.
//! 5. Predict the unlabeled target split through target encoder + head.
//!
//! The unlabeled target split is never used for training.

mod baseline;
mod batching;
pub(crate) mod stages;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use baseline::{resize_bilinear, run_source_only_baseline};
pub use batching::{class_balance_resample, make_aligned_batches, sort_by_class, BatchPair};
pub use stages::{train_stage1_autoencoders, train_stage2_classifier, train_stage3_finetune};

use crate::datagen::{Dataset, Task};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{
    build_adaptation_model, load_model, save_model, AdaptationModel, AutoencoderSpec, HeadOutput,
    HeadSpec, DEFAULT_BOTTLENECK,
};
use crate::optim::AdamConfig;

/// Target-unlabeled predictions: labels with probability rows, or values.
pub type Predictions = HeadOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CwsGradient {
    /// The alignment term updates both encoders.
    #[default]
    Both,
    /// The source bottleneck is treated as a constant by the alignment term.
    TargetOnly,
}

impl std::str::FromStr for CwsGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CwsGradient::Both),
            "target-only" => Ok(CwsGradient::TargetOnly),
            other => Err(Error::InvalidConfig(format!("unknown cws gradient mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub min_relative_improvement: f64,
    pub patience: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            min_relative_improvement: 1e-4,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs_per_stage: usize,
    /// Overrides `max_epochs_per_stage` for auto-encoder training only.
    pub autoencoder_max_epochs: Option<usize>,
    pub convergence: ConvergenceConfig,
    pub seed: u64,
    pub bottleneck_size: usize,
    /// Widths of the head's relu layers; the head has `len() + 1` layers.
    pub head_hidden_layers: Vec<usize>,
    pub cws_gradient: CwsGradient,
    /// Fraction of each class held out to decide head convergence.
    pub holdout_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            loss: LossConfig::default(),
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs_per_stage: 200,
            autoencoder_max_epochs: None,
            convergence: ConvergenceConfig::default(),
            seed: 0,
            bottleneck_size: DEFAULT_BOTTLENECK,
            head_hidden_layers: vec![64],
            cws_gradient: CwsGradient::Both,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let invalid = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.bottleneck_size == 0 {
            return invalid("bottleneck_size must be positive");
        }
        if self.convergence.patience == 0 || !(self.convergence.min_relative_improvement >= 0.0) {
            return invalid("convergence needs patience >= 1 and a non-negative threshold");
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return invalid("holdout_fraction must lie in [0, 0.5)");
        }
        Ok(())
    }

    /// Number of head layers (hidden + output).
    pub fn classifier_layers(&self) -> usize {
        self.head_hidden_layers.len() + 1
    }

    pub(crate) fn epochs_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::Autoencoders => self.autoencoder_max_epochs.unwrap_or(self.max_epochs_per_stage),
            _ => self.max_epochs_per_stage,
        }
    }

    pub fn head_spec(&self, task: Task, num_classes: usize) -> HeadSpec {
        let mut spec = match task {
            Task::Classification => HeadSpec::classifier(self.bottleneck_size, num_classes),
            Task::Regression => HeadSpec::regressor(self.bottleneck_size),
        };
        spec.hidden_layers = self.head_hidden_layers.clone();
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Autoencoders = 1,
    Classifier = 2,
    Finetune = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Autoencoders, Stage::Classifier, Stage::Finetune];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn dir_name(self) -> String {
        format!("stage{}", self.number())
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Autoencoders => "autoencoders",
            Stage::Classifier => "classifier",
            Stage::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" | "1" | "autoencoders" => Ok(Stage::Autoencoders),
            "stage2" | "2" | "classifier" => Ok(Stage::Classifier),
            "stage3" | "3" | "finetune" => Ok(Stage::Finetune),
            other => Err(Error::InvalidConfig(format!("unknown stage `{other}`"))),
        }
    }
}

/// One line of `training_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub parts: std::collections::BTreeMap<String, f64>,
    pub seconds: f64,
}

/// Receives one record per finished epoch.
pub trait EpochSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;
}

/// Discards records.
pub struct NoLog;

impl EpochSink for NoLog {
    fn record(&mut self, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl EpochSink for Vec<EpochRecord> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends JSON lines to a file.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn append(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JsonlLog {
            path,
            out: BufWriter::new(file),
        })
    }
}

impl EpochSink for JsonlLog {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs_run: usize,
    /// Loss of the last epoch (held-out loss for the head stages).
    pub final_loss: Option<f64>,
    pub loss_history: Vec<f64>,
    pub converged: bool,
    pub seconds: f64,
}

/// The three dataset splits used by a run.
#[derive(Debug, Clone, Copy)]
pub struct PipelineData<'a> {
    pub source: &'a Dataset,
    pub target_labeled: &'a Dataset,
    pub target_unlabeled: &'a Dataset,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where `stage1/`, `stage2/` and `stage3/` checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Start at this stage, loading the previous stage's checkpoint.
    pub resume_from: Option<Stage>,
    /// Stop (without predicting) after this stage.
    pub stop_after: Option<Stage>,
    pub skip_stage3: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: AdaptationModel,
    pub reports: Vec<StageReport>,
    /// `None` when the run stopped before prediction.
    pub predictions: Option<Predictions>,
}

impl PipelineOutput {
    /// All executed stages converged (rather than hitting the epoch cap).
    pub fn all_converged(&self) -> bool {
        self.reports.iter().all(|r| r.converged)
    }
}

/// Number of classes spanned by the labels of both labeled inputs.
pub fn num_classes(source: &Dataset, target_labeled: &Dataset) -> Result<usize> {
    source.labels()?;
    target_labeled.labels()?;
    Ok(source.num_classes_present().max(target_labeled.num_classes_present()))
}

/// Resampled and class-sorted copies of the source and labeled target sets.
pub fn prepare_stage1_data(
    source: &Dataset,
    target_labeled: &Dataset,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (s, t) = class_balance_resample(source, target_labeled, seed)?;
    Ok((sort_by_class(&s)?, sort_by_class(&t)?))
}

/// A fresh model sized for the given data.
pub fn build_model_for(
    source: &Dataset,
    target: &Dataset,
    task: Task,
    num_classes: usize,
    cfg: &TrainingConfig,
) -> Result<AdaptationModel> {
    let mut model = build_adaptation_model(
        &AutoencoderSpec::new(source.shape, cfg.bottleneck_size),
        &AutoencoderSpec::new(target.shape, cfg.bottleneck_size),
        &cfg.head_spec(task, num_classes),
        cfg.seed,
    )?;
    model.num_classes = num_classes;
    Ok(model)
}

fn checkpoint(dir: &Option<PathBuf>, stage: Stage, model: &AdaptationModel) -> Result<()> {
    if let Some(dir) = dir {
        save_model(model, dir.join(stage.dir_name()))?;
    }
    Ok(())
}

fn resume_checkpoint(dir: &Path, stage: Stage) -> Result<AdaptationModel> {
    let previous = match stage {
        Stage::Autoencoders => unreachable!("stage 1 starts from scratch"),
        Stage::Classifier => Stage::Autoencoders,
        Stage::Finetune => Stage::Classifier,
    };
    let model = load_model(dir.join(previous.dir_name()))?;
    let done = match previous {
        Stage::Autoencoders => model.stages().autoencoders,
        _ => model.stages().classifier,
    };
    if !done {
        return Err(Error::StageOrder(format!(
            "checkpoint {} does not record a completed {} stage",
            previous.dir_name(),
            previous.name()
        )));
    }
    Ok(model)
}

/// Runs every stage in order, checkpointing after each, then predicts the
/// unlabeled target split.
pub fn run_full_pipeline(
    data: PipelineData<'_>,
    task: Task,
    cfg: &TrainingConfig,
    options: &RunOptions,
    sink: &mut dyn EpochSink,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if task == Task::Regression && (data.source.targets.is_none() || data.target_labeled.targets.is_none()) {
        return Err(Error::InvalidConfig(
            "regression needs targets on the source and labeled target sets".into(),
        ));
    }
    let classes = num_classes(data.source, data.target_labeled)?;
    let start = options.resume_from.unwrap_or(Stage::Autoencoders);
    let mut model = match start {
        Stage::Autoencoders => build_model_for(data.source, data.target_labeled, task, classes, cfg)?,
        later => {
            let dir = options.checkpoint_dir.as_deref().ok_or_else(|| {
                Error::InvalidConfig("resuming needs a checkpoint directory".into())
            })?;
            resume_checkpoint(dir, later)?
        }
    };
    let expected = cfg.head_spec(task, classes).kind;
    if model.head().kind() != expected {
        return Err(Error::KindMismatch {
            expected: expected.to_string(),
            found: model.head().kind().to_string(),
        });
    }

    let mut reports = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|&s| s >= start) {
        let report = match stage {
            Stage::Autoencoders => {
                let (s, t) = prepare_stage1_data(data.source, data.target_labeled, cfg.seed)?;
                train_stage1_autoencoders(&mut model, &s, &t, cfg, sink)?
            }
            Stage::Classifier => train_stage2_classifier(&mut model, data.source, cfg, sink)?,
            Stage::Finetune if options.skip_stage3 => {
                model.stages.finetune = false;
                model.stages.finetune_skipped = true;
                checkpoint(&options.checkpoint_dir, stage, &model)?;
                if options.stop_after == Some(stage) {
                    return Ok(PipelineOutput {
                        model,
                        reports,
                        predictions: None,
                    });
                }
                continue;
            }
            Stage::Finetune => train_stage3_finetune(&mut model, data.target_labeled, cfg, sink)?,
        };
        reports.push(report);
        checkpoint(&options.checkpoint_dir, stage, &model)?;
        if options.stop_after == Some(stage) {
            return Ok(PipelineOutput {
                model,
                reports,
                predictions: None,
            });
        }
    }
    let predictions = predict(&model, data.target_unlabeled)?;
    Ok(PipelineOutput {
        model,
        reports,
        predictions: Some(predictions),
    })
}

const PREDICT_CHUNK: usize = 256;

/// Target encoder + head over a dataset. Requires all stages complete.
pub fn predict(model: &AdaptationModel, dataset: &Dataset) -> Result<Predictions> {
    if !model.stages().ready_for_prediction() {
        return Err(Error::StageOrder(format!(
            "prediction needs all stages complete, have {:?}",
            model.stages()
        )));
    }
    if dataset.shape != model.target_ae().spec().input_shape {
        return Err(Error::ShapeMismatch(format!(
            "dataset shape {} does not match the target encoder input {}",
            dataset.shape,
            model.target_ae().spec().input_shape
        )));
    }
    predict_with(dataset, |chunk| model.forward_target(chunk))
}

/// Applies `f` to fixed-size chunks and concatenates the outputs.
pub(crate) fn predict_with(
    dataset: &Dataset,
    f: impl Fn(&[f32]) -> Result<HeadOutput>,
) -> Result<Predictions> {
    let d = dataset.shape.len();
    let mut labels = Vec::new();
    let mut probs: Vec<f32> = Vec::new();
    let mut width = 0;
    let mut values = Vec::new();
    let mut classes = None;
    for chunk in dataset.samples.chunks(PREDICT_CHUNK * d) {
        match f(chunk)? {
            HeadOutput::Classes {
                labels: l,
                probabilities,
            } => {
                classes = Some(true);
                width = probabilities.cols();
                labels.extend(l);
                probs.extend_from_slice(probabilities.as_slice());
            }
            HeadOutput::Values(v) => {
                classes = Some(false);
                values.extend(v);
            }
        }
    }
    Ok(match classes {
        Some(false) => HeadOutput::Values(values),
        _ => HeadOutput::Classes {
            probabilities: crate::tensor::Matrix::from_vec(labels.len(), width, probs)?,
            labels,
        },
    })
}
