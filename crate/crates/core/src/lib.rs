//! Continual audio-text retrieval on a frozen dual-encoder backbone.
//!
//! The trainable state is a small set of audio prompts, two linear maps that
//! derive text prefix/postfix prompts from them, and the projection heads.
//! Each incremental step distils features and similarities from the previous
//! step's snapshot. Baseline strategies (finetuning, audio-only prompts,
//! text-only prompts, low-rank adapters) share the same encoders and protocol.

pub mod atpg;
pub mod baselines;
pub mod continual;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod snapshot;

pub use error::{Error, ManifestError, Result, SnapshotError};
