//! Desk-scale stereo matching network with iterative refinement.

pub mod config;
pub mod features;
pub mod gru;
pub mod model;
pub mod toy;
pub mod volume;

pub use config::TscaConfig;
pub use features::{ContextNet, FeatureNet, ResBlock};
pub use gru::{ContextInjection, ConvGru, GruGates};
pub use model::{sequence_loss, Tsca, TscaOutput};
pub use toy::{toy_dataset, train_toy, ToyPair, TrainLog, TrainOptions, TrainedModel};
pub use volume::{correlation_volume, lookup, lookup_taps, soft_argmax, Regularizer};
