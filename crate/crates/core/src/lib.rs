//! Task-incremental unsupervised anomaly detection.
//!
//! Each task contributes a memory entry holding routing keys, a learned
//! key/value prompt, cross-modal fusion weights, and a coreset of fused normal
//! patch features. Test images are routed to a task by key similarity and
//! scored by nearest-neighbor distance to that task's coreset. Entries are
//! never modified after their task finishes training.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod memory_bank;
pub mod numerics;
pub mod objectives;
pub mod synth;
pub mod tensor_store;
pub mod trainer;

pub use error::{Error, Result};
