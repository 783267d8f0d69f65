pub mod diagnose;
pub mod evaluate;
pub mod generate;
pub mod plot;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use saeda::eval::{cluster_separation, export_embedding, score_predictions, EmbeddingMethod, EvalReport};
use saeda::{generate_paired, load_dataset, save_dataset, AdaptationModel, Dataset, GroundTruth, HeadOutput, PairedData};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

pub const DATA_DIR: &str = "data";
pub const TRUTH_FILE: &str = "truth.json";

/// The three splits of a run plus ground truth when it is known.
pub struct RunData {
    pub source: Dataset,
    pub target_labeled: Dataset,
    pub target_unlabeled: Dataset,
    pub truth: Option<GroundTruth>,
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(saeda::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

/// Saves the splits under `dir/data` and ground truth to `dir/data/truth.json`.
pub fn save_paired(data: &PairedData, dir: &Path) -> Result<PathBuf, CliError> {
    let root = dir.join(DATA_DIR);
    for d in [&data.source, &data.target_labeled, &data.target_unlabeled] {
        save_dataset(d, root.join(d.split.dir_name()))?;
    }
    write_json(&data.truth, &root.join(TRUTH_FILE))?;
    Ok(root)
}

/// Generates (and saves under the output directory) or loads the run data.
pub fn obtain_data(cfg: &RunConfig, out: &Path) -> Result<RunData, CliError> {
    match cfg.data_source() {
        DataSource::Generate(dc) => {
            let paired = generate_paired(dc)?;
            save_paired(&paired, out)?;
            Ok(RunData {
                source: paired.source,
                target_labeled: paired.target_labeled,
                target_unlabeled: paired.target_unlabeled,
                truth: Some(paired.truth),
            })
        }
        DataSource::Load(p) => Ok(RunData {
            source: load_dataset(&p.source)?,
            target_labeled: load_dataset(&p.target_labeled)?,
            target_unlabeled: load_dataset(&p.target_unlabeled)?,
            truth: p.truth.as_deref().map(read_json).transpose()?,
        }),
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum PredictionFile<'a> {
    Classes {
        labels: &'a [usize],
        probabilities: Vec<&'a [f32]>,
    },
    Values {
        values: &'a [f64],
    },
}

pub fn write_predictions(p: &HeadOutput, path: &Path) -> Result<(), CliError> {
    let file = match p {
        HeadOutput::Classes { labels, probabilities } => PredictionFile::Classes {
            labels,
            probabilities: probabilities.iter_rows().collect(),
        },
        HeadOutput::Values(values) => PredictionFile::Values { values },
    };
    write_json(&file, path)
}

/// Scores predictions and attaches the target-encoder embedding of the
/// scored split, labeled with the true classes.
pub fn build_report(
    model: &AdaptationModel,
    dataset: &Dataset,
    predictions: &HeadOutput,
    truth: &GroundTruth,
) -> Result<EvalReport, CliError> {
    let mut report = score_predictions(predictions, truth)?;
    let labeled = Dataset {
        labels: Some(truth.labels.clone()),
        ..dataset.clone()
    };
    if dataset.len() >= 3 {
        let embedding = export_embedding(model, &labeled, EmbeddingMethod::Linear2d)?;
        report.embedding_separation = cluster_separation(&embedding.coords, &truth.labels).ok();
        report.embedding = Some(embedding);
    }
    Ok(report)
}

/// Writes `report.json`, `confusion.csv` and `embedding.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), CliError> {
    report.write_json(&dir.join("report.json"))?;
    if let Some(confusion) = &report.confusion {
        let names = report.class_names.clone().unwrap_or_default();
        saeda::eval::write_confusion_csv(confusion, &names, &dir.join("confusion.csv"))?;
    }
    if let Some(embedding) = &report.embedding {
        saeda::eval::write_embedding_csv(embedding, &dir.join("embedding.csv"))?;
    }
    Ok(())
}

/// The final stdout line scripts parse.
pub fn print_metric(report: &EvalReport) {
    if let Some(m) = report.headline() {
        println!("metric={m}");
    }
}
