use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Shape, Split};
use crate::container::{self, DTYPE, FORMAT_VERSION};
use crate::error::{Error, Result};

const SAMPLES_FILE: &str = "samples.f32";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format_version: u32,
    split: Split,
    num_samples: usize,
    shape: Shape,
    dtype: String,
    byte_order: String,
    layout: String,
    data_file: String,
    labels: Option<Vec<usize>>,
    targets: Option<Vec<f64>>,
    class_names: Option<Vec<String>>,
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        split: dataset.split,
        num_samples: dataset.len(),
        shape: dataset.shape,
        dtype: DTYPE.into(),
        byte_order: "little".into(),
        layout: "chw".into(),
        data_file: SAMPLES_FILE.into(),
        labels: dataset.labels.clone(),
        targets: dataset.targets.clone(),
        class_names: dataset.class_names.clone(),
    };
    container::write_manifest(dir, &manifest)?;
    container::write_f32(&dir.join(SAMPLES_FILE), &dataset.samples)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let m: DatasetManifest = container::read_manifest(dir)?;
    container::check_dtype(&m.dtype)?;
    if m.byte_order != "little" || m.layout != "chw" {
        return Err(Error::Manifest(format!(
            "unsupported byte order `{}` or layout `{}`",
            m.byte_order, m.layout
        )));
    }
    if m.shape.is_empty() {
        return Err(Error::Manifest(format!("degenerate shape {}", m.shape)));
    }
    let expected = m.num_samples * m.shape.len();
    let samples = container::read_f32(&dir.join(&m.data_file), expected, "samples")?;
    for (what, len) in [
        ("labels", m.labels.as_ref().map(Vec::len)),
        ("targets", m.targets.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != m.num_samples {
                return Err(Error::CountMismatch {
                    what: what.into(),
                    expected: m.num_samples,
                    found: len,
                });
            }
        }
    }
    Ok(Dataset {
        shape: m.shape,
        samples,
        labels: m.labels,
        targets: m.targets,
        split: m.split,
        class_names: m.class_names,
    })
}
