//! Auto-encoders, the shared head, and the paired model that joins them.

mod autoencoder;
mod checkpoint;
mod head;
pub(crate) mod layers;

use serde::{Deserialize, Serialize};

pub use autoencoder::{build_autoencoder, Autoencoder, AutoencoderSpec, DEFAULT_BOTTLENECK};
pub use checkpoint::{load_model, load_model_expecting, params_digest, save_model};
pub use head::{Head, HeadKind, HeadOutput, HeadSpec, HeadTargets, TargetScaling};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Which training stages have been applied to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageFlags {
    pub autoencoders: bool,
    pub classifier: bool,
    pub finetune: bool,
    /// Fine-tuning was deliberately skipped (ablation).
    #[serde(default)]
    pub finetune_skipped: bool,
}

impl StageFlags {
    pub fn ready_for_prediction(&self) -> bool {
        self.autoencoders && self.classifier && (self.finetune || self.finetune_skipped)
    }
}

/// Parameterless identity link between the two bottleneck layers. It only
/// exists so that both auto-encoders sit in one graph; values and gradients
/// pass through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bridge {
    installed: bool,
}

impl Bridge {
    pub fn installed(&self) -> bool {
        self.installed
    }

    pub fn num_params(&self) -> usize {
        0
    }

    pub fn link<'a, T>(&self, source: &'a T, target: &'a T) -> (&'a T, &'a T) {
        (source, target)
    }
}

/// Source and target auto-encoders bridged into one graph, plus a head that
/// reads either bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationModel {
    pub(crate) source_ae: Autoencoder,
    pub(crate) target_ae: Autoencoder,
    pub(crate) head: Head,
    pub(crate) bridge: Bridge,
    pub(crate) stages: StageFlags,
    /// Number of classes the alignment runs over; 0 until known.
    pub(crate) num_classes: usize,
}

/// Output of a joint forward pass over one source and one target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct JointForward {
    pub source_bottleneck: Matrix<f32>,
    pub target_bottleneck: Matrix<f32>,
    pub source_reconstruction: Vec<f32>,
    pub target_reconstruction: Vec<f32>,
}

pub fn build_adaptation_model(
    source_spec: &AutoencoderSpec,
    target_spec: &AutoencoderSpec,
    head_spec: &HeadSpec,
    seed: u64,
) -> Result<AdaptationModel> {
    if source_spec.bottleneck_size != target_spec.bottleneck_size {
        return Err(Error::InvalidConfig(format!(
            "source and target bottlenecks must match for a shared head ({} vs {})",
            source_spec.bottleneck_size, target_spec.bottleneck_size
        )));
    }
    if head_spec.input_size != source_spec.bottleneck_size {
        return Err(Error::InvalidConfig(format!(
            "head input width {} does not match bottleneck size {}",
            head_spec.input_size, source_spec.bottleneck_size
        )));
    }
    let num_classes = match head_spec.kind {
        HeadKind::SoftmaxClassifier => head_spec.output_size,
        HeadKind::LinearRegressor => 0,
    };
    Ok(AdaptationModel {
        source_ae: build_autoencoder(source_spec, seed::derive(seed, &[seed::stream::INIT_SOURCE]))?,
        target_ae: build_autoencoder(target_spec, seed::derive(seed, &[seed::stream::INIT_TARGET]))?,
        head: Head::new(head_spec, seed::derive(seed, &[seed::stream::INIT_HEAD]))?,
        bridge: Bridge { installed: true },
        stages: StageFlags::default(),
        num_classes,
    })
}

impl AdaptationModel {
    pub fn source_ae(&self) -> &Autoencoder {
        &self.source_ae
    }

    pub fn target_ae(&self) -> &Autoencoder {
        &self.target_ae
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn bridge(&self) -> Bridge {
        self.bridge
    }

    pub fn set_bridge_installed(&mut self, installed: bool) {
        self.bridge.installed = installed;
    }

    pub fn stages(&self) -> StageFlags {
        self.stages
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Re-initializes the head, as done before classifier training.
    pub(crate) fn reset_head(&mut self, seed: u64) -> Result<()> {
        self.head = Head::new(&self.head.spec().clone(), seed)?;
        Ok(())
    }

    /// Encodes and reconstructs one batch per domain. With the bridge
    /// installed the two bottlenecks are routed through it; the results are
    /// identical either way.
    pub fn forward_joint(&self, source: &[f32], target: &[f32]) -> Result<JointForward> {
        let zs = self.source_ae.encode(source)?;
        let zt = self.target_ae.encode(target)?;
        let (zs_in, zt_in) = if self.bridge.installed {
            self.bridge.link(&zs, &zt)
        } else {
            (&zs, &zt)
        };
        let source_reconstruction = self.source_ae.decode(zs_in)?;
        let target_reconstruction = self.target_ae.decode(zt_in)?;
        Ok(JointForward {
            source_bottleneck: zs,
            target_bottleneck: zt,
            source_reconstruction,
            target_reconstruction,
        })
    }

    /// Head applied to the target encoder, regardless of training progress.
    pub fn forward_target(&self, batch: &[f32]) -> Result<HeadOutput> {
        self.head.predict(&self.target_ae.encode(batch)?)
    }

    /// Head applied to the source encoder, regardless of training progress.
    pub fn forward_source(&self, batch: &[f32]) -> Result<HeadOutput> {
        self.head.predict(&self.source_ae.encode(batch)?)
    }

    pub fn num_params(&self) -> usize {
        self.source_ae.num_params() + self.target_ae.num_params() + self.head.num_params()
    }
}
