//! Frozen dual-encoder classifier with attachable low-rank plugin adapters.
//!
//! The image path is a small stack of affine layers with `tanh` between them;
//! labels are embedded by a frozen table and classification is cosine
//! similarity against those rows divided by the encoder's temperature.

mod adapter;
mod encoder;
mod forward;
mod train;

pub use adapter::{AdapterConfig, LoraAdapter, PluginModule};
pub use encoder::{AffineLayer, BaseEncoder, EncoderConfig, LabelEmbeddingTable};
pub use forward::{
    classify, classify_batch, classify_batch_backward, forward, forward_mixture, predict,
    AdapterGrads, ForwardPass, MixtureEntry,
};
pub use train::{cross_entropy_on, train_for_iterations, train_plugin, train_step, TrainConfig};
