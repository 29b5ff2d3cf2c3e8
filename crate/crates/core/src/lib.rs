//! Concept-branch convolutional classifiers: a small reverse-mode autodiff
//! engine, a procedural dataset with per-concept ground truth, the five-part
//! network, its training objective, and the concept-alignment metrics.

pub mod data;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;
pub mod util;
pub mod verify;
