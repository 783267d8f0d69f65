//! Run configuration: one JSON file naming the data, the training settings,
//! the output directory and any ablation switches.

use std::fs;
use std::path::{Path, PathBuf};

use saeda::pipeline::CwsGradient;
use saeda::{DatasetConfig, Task, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::RunArgs;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");
pub const REGRESSION_CONFIG: &str = include_str!("../configs/regression.json");

/// Directories of previously saved splits. Relative paths resolve against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub source: PathBuf,
    pub target_labeled: PathBuf,
    pub target_unlabeled: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub beta_override: Option<f64>,
    pub cws_grad: CwsGradient,
    pub skip_stage3: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_paths: Option<DatasetPaths>,
    #[serde(default)]
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ablations: Ablations,
}

/// Where the data for a run comes from.
pub enum DataSource<'a> {
    Generate(&'a DatasetConfig),
    Load(&'a DatasetPaths),
}

impl RunConfig {
    /// Parses JSON, reporting the failing key path with line and column.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            CliError::Config {
                path: origin.to_path_buf(),
                message: format!(
                    "at `{}` (line {}, column {}): {}",
                    e.path(),
                    inner.line(),
                    inner.column(),
                    inner
                ),
            }
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    /// Loads `path`, or the bundled default (regression default for
    /// `--task regression`) when no path is given, then applies overrides.
    pub fn resolve(args: &RunArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let mut cfg = Self::parse(&text, path)?;
                let base = path.parent().unwrap_or(Path::new(""));
                // Absolute paths keep a dumped effective config valid wherever it lands.
                let anchor = |p: &mut PathBuf| {
                    let joined = base.join(&*p);
                    *p = fs::canonicalize(&joined).unwrap_or(joined);
                };
                if let Some(paths) = &mut cfg.dataset_paths {
                    anchor(&mut paths.source);
                    anchor(&mut paths.target_labeled);
                    anchor(&mut paths.target_unlabeled);
                    if let Some(t) = &mut paths.truth {
                        anchor(t);
                    }
                }
                cfg
            }
            None => {
                let (text, name) = match args.task {
                    Some(Task::Regression) => (REGRESSION_CONFIG, "<bundled regression.json>"),
                    _ => (DEFAULT_CONFIG, "<bundled default.json>"),
                };
                Self::parse(text, Path::new(name))?
            }
        };
        if let Some(seed) = args.seed {
            cfg.training.seed = seed;
            if let Some(d) = &mut cfg.dataset {
                d.seed = seed;
            }
        }
        if let Some(task) = args.task {
            if task != cfg.task && cfg.dataset_paths.is_some() {
                return Err(CliError::Usage(format!(
                    "--task {task} conflicts with the saved {} datasets",
                    cfg.task
                )));
            }
            cfg.task = task;
            if let Some(d) = &mut cfg.dataset {
                d.task = task;
            }
        }
        if let Some(out) = &args.output {
            cfg.output_dir = out.clone();
        }
        cfg.validate(args.config.as_deref().unwrap_or(Path::new("<config>")))?;
        Ok(cfg)
    }

    fn validate(&self, origin: &Path) -> Result<(), CliError> {
        let err = |message: String| CliError::Config {
            path: origin.to_path_buf(),
            message,
        };
        match (&self.dataset, &self.dataset_paths) {
            (Some(_), Some(_)) => return Err(err("give either `dataset` or `dataset_paths`, not both".into())),
            (None, None) => return Err(err("one of `dataset` or `dataset_paths` is required".into())),
            (Some(d), None) => {
                if d.task != self.task {
                    return Err(err(format!("`dataset.task` is {} but `task` is {}", d.task, self.task)));
                }
                d.validate().map_err(|e| err(e.to_string()))?;
            }
            (None, Some(_)) => {}
        }
        if let Some(b) = self.ablations.beta_override {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(err("`ablations.beta_override` must be a non-negative number".into()));
            }
        }
        self.training.validate().map_err(|e| err(e.to_string()))
    }

    pub fn data_source(&self) -> DataSource<'_> {
        match (&self.dataset, &self.dataset_paths) {
            (Some(d), _) => DataSource::Generate(d),
            (None, Some(p)) => DataSource::Load(p),
            (None, None) => unreachable!("validated on load"),
        }
    }

    /// Training settings with the ablation switches folded in.
    pub fn effective_training(&self) -> TrainingConfig {
        let mut t = self.training.clone();
        if let Some(beta) = self.ablations.beta_override {
            t.loss.beta = beta;
        }
        t.cws_gradient = self.ablations.cws_grad;
        t
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(saeda::Error::from)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}
