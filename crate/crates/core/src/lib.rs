//! Image-query to multi-modal entity retrieval.
//!
//! Two-tower encoders with concept-aware fusion on the doc side, trained as
//! large-scale proxy classification with an additive angular margin, a
//! pruned (top-K) softmax over a sharded proxy store, and a three-phase
//! curriculum. Includes weakly supervised category construction from click
//! logs and clustering, and an exact retrieval evaluation harness.

pub mod error;
pub mod numerics;

pub use error::{MixerError, Result};
pub mod encoders;
pub mod fusion;
pub mod model;
pub mod proxy_loss;
pub mod data_org;
pub mod training;
pub mod retrieval_eval;
pub mod grad_report;
pub mod config;
pub mod checkpoint;
pub mod io;
pub mod pipeline;
