//! Collaborative development of a shared classifier from independently
//! trained low-rank adapters.
//!
//! Contributors train a [`model::PluginModule`] and a distilled surrogate
//! dataset ([`distill::DistilledDataset`]) on private data, commit both to a
//! content-addressed [`forge::Repository`], and the main branch absorbs them
//! one round at a time either by parameter fusion or by output mixture
//! ([`merge`]). Merge coefficients are searched without gradients against the
//! distilled data only, so raw examples never leave the contributor.

pub mod codec;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod eval;
pub mod forge;
pub mod merge;
pub mod model;
pub mod numerics;

pub use error::{ForgeError, Result};
