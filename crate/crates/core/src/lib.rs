//! Two-stage facial expression recognition.
//!
//! Stage 1 trains an encoder/decoder generator against a two-headed
//! discriminator so that the encoder's code carries the expression while a
//! one-hot identity code carries the identity. Stage 2 freezes the encoder
//! and trains four classifiers on its intermediate feature maps plus one on
//! the code fused with their hidden layers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod stage1;
pub mod stage2;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, RunManifest};
pub use data::{Dataset, FoldSpec, LabeledImage};
pub use error::{Error, Result};
pub use eval::{FoldResult, MethodResults, ProbeReport};
pub use losses::Stage2LossConfig;
pub use models::{
    Decoder, Discriminator, DiscriminatorOutput, Encoder, ExpressionCode, Generator, IdentityCode, ModelConfig,
    NoiseVector, ResidueFeatures,
};
pub use stage1::{Stage1Config, TrainState};
pub use stage2::{FrozenEncoder, Stage2Config, Stage2Heads};
