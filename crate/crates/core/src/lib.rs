//! Cross-modal transfer by training a source and a target convolutional
//! auto-encoder together, aligning their bottleneck spaces class by class
//! with a centroid MMD penalty, then reusing one classifier or regressor head
//! across both encoders.
//!
//! The usual flow is [`datagen::generate_paired`] (or
//! [`datagen::load_dataset`]), then [`pipeline::run_full_pipeline`], then
//! the metrics in [`eval`].

pub mod container;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod tensor;

pub use datagen::{
    generate_paired, load_dataset, save_dataset, Dataset, DatasetConfig, GroundTruth, PairedData,
    Shape, Split, Task,
};
pub use error::{Error, Result};
pub use losses::LossConfig;
pub use model::{
    build_adaptation_model, build_autoencoder, load_model, save_model, AdaptationModel,
    Autoencoder, AutoencoderSpec, HeadKind, HeadSpec,
};
pub use model::HeadOutput;
pub use pipeline::{run_full_pipeline, Predictions, StageReport, TrainingConfig};
pub use tensor::Matrix;
