//! Model persistence in the manifest + raw f32 container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdaptationModel, Autoencoder, AutoencoderSpec, Bridge, Head, HeadKind, HeadSpec, StageFlags, TargetScaling};
use crate::container::{self, DTYPE, FORMAT_VERSION};
use crate::error::{Error, Result};

const PARAMS_FILE: &str = "params.f32";
const MODEL_KIND: &str = "adaptation_model";

#[derive(Debug, Serialize, Deserialize)]
struct Block {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    dtype: String,
    byte_order: String,
    source_spec: AutoencoderSpec,
    target_spec: AutoencoderSpec,
    head_spec: HeadSpec,
    target_scaling: Option<TargetScaling>,
    stages: StageFlags,
    num_classes: usize,
    blocks: Vec<Block>,
    params_file: String,
    sha256: String,
}

fn blocks(model: &AdaptationModel) -> [(&'static str, &[f32]); 5] {
    [
        ("source_encoder", &model.source_ae.encoder_params),
        ("source_decoder", &model.source_ae.decoder_params),
        ("target_encoder", &model.target_ae.encoder_params),
        ("target_decoder", &model.target_ae.decoder_params),
        ("head", &model.head.params),
    ]
}

/// Hex SHA-256 of the serialized parameter blocks.
pub fn params_digest(model: &AdaptationModel) -> String {
    let mut bytes = Vec::new();
    for (_, b) in blocks(model) {
        bytes.extend(container::encode_f32(b));
    }
    container::sha256_hex(&bytes)
}

pub fn save_model(model: &AdaptationModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut bytes = Vec::with_capacity(model.num_params() * 4);
    let mut block_list = Vec::new();
    for (name, b) in blocks(model) {
        bytes.extend(container::encode_f32(b));
        block_list.push(Block {
            name: name.into(),
            len: b.len(),
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        kind: MODEL_KIND.into(),
        dtype: DTYPE.into(),
        byte_order: "little".into(),
        source_spec: model.source_ae.spec().clone(),
        target_spec: model.target_ae.spec().clone(),
        head_spec: model.head.spec().clone(),
        target_scaling: model.head.scaling,
        stages: model.stages,
        num_classes: model.num_classes,
        blocks: block_list,
        params_file: PARAMS_FILE.into(),
        sha256: container::sha256_hex(&bytes),
    };
    container::write_manifest(dir, &manifest)?;
    let path = dir.join(PARAMS_FILE);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<AdaptationModel> {
    let dir = dir.as_ref();
    let m: ModelManifest = container::read_manifest(dir)?;
    if m.kind != MODEL_KIND {
        return Err(Error::Manifest(format!("not a model checkpoint (kind `{}`)", m.kind)));
    }
    container::check_dtype(&m.dtype)?;

    let (enc_s, dec_s) = m.source_spec.networks();
    let (enc_t, dec_t) = m.target_spec.networks();
    let head_len = m.head_spec.network().num_params();
    let expected = [
        ("source_encoder", enc_s.num_params()),
        ("source_decoder", dec_s.num_params()),
        ("target_encoder", enc_t.num_params()),
        ("target_decoder", dec_t.num_params()),
        ("head", head_len),
    ];
    let declared: Vec<(&str, usize)> = m.blocks.iter().map(|b| (b.name.as_str(), b.len)).collect();
    if declared != expected {
        let total = |v: &[(&str, usize)]| v.iter().map(|b| b.1).sum::<usize>();
        return Err(Error::CountMismatch {
            what: "parameter blocks declared by the manifest".into(),
            expected: total(&expected),
            found: total(&declared),
        });
    }

    let total: usize = expected.iter().map(|b| b.1).sum();
    let path = dir.join(&m.params_file);
    let params = container::read_f32(&path, total, "parameters")?;
    if container::sha256_hex(&container::encode_f32(&params)) != m.sha256 {
        return Err(Error::HashMismatch(path));
    }

    let mut rest = params.as_slice();
    let mut take = |n: usize| {
        let (a, b) = rest.split_at(n);
        rest = b;
        a.to_vec()
    };
    let source_ae = Autoencoder::from_parts(m.source_spec, take(expected[0].1), take(expected[1].1))?;
    let target_ae = Autoencoder::from_parts(m.target_spec, take(expected[2].1), take(expected[3].1))?;
    let head = Head::from_parts(m.head_spec, take(head_len), m.target_scaling)?;
    Ok(AdaptationModel {
        source_ae,
        target_ae,
        head,
        bridge: Bridge { installed: true },
        stages: m.stages,
        num_classes: m.num_classes,
    })
}

/// Loads a checkpoint and checks that its head is of the requested kind.
pub fn load_model_expecting(dir: impl AsRef<Path>, kind: HeadKind) -> Result<AdaptationModel> {
    let model = load_model(dir)?;
    if model.head.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            found: model.head.kind().to_string(),
        });
    }
    Ok(model)
}
