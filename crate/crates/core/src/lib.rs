//! Learned routing over a pool of candidate models.
//!
//! Given a featurized multimodal query and a set of model descriptors, the
//! router predicts each candidate's answer quality, applies a bounded
//! capsule correction and selects the available model with the highest
//! `quality - lambda * cost`.

pub mod domain;
pub mod evaluation;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod training;
