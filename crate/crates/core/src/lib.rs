//! Multi-granularity promptable segmentation on synthetic scenes.
//!
//! A click becomes K level-specific queries that a small cross-attention
//! decoder turns into K candidate masks, one per granularity, each with
//! decoupled object and part scores. Training matches the K outputs against
//! every ground-truth level under the click with the Hungarian algorithm.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod mask;
pub mod matching;
pub mod net;
pub mod objective;
pub mod optim;
pub mod prompt;
pub mod scene;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
