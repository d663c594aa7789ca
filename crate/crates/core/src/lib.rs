//! Instance-level contrastive learning with dynamic pseudo-positive mining.
//!
//! The pipeline trains an encoder without labels by mining pseudo positives
//! from each training tuple (an anchor plus its top-ranked candidate-pool
//! neighbors) and then from a memory bank, using the anchor together with
//! its accepted neighbors as a *query set*. A gated contrastive loss pulls
//! mined positives together and pushes hard negatives apart.
//!
//! Modules, bottom-up:
//!
//! | module | role |
//! |--------|------|
//! | [`numerics`] | unit vectors, cosine similarity, analytic cosine gradients |
//! | [`synthdata`] | seeded synthetic instance datasets and their clean/augmented/auxiliary views |
//! | [`encoder`] | the encoder contract, a linear reference encoder and Adam |
//! | [`candidates`] | exact top-P candidate pools |
//! | [`membank`] | clean (mining) and augmented (loss) memory banks |
//! | [`miner`] | in-batch positive selection and query-set memory mining |
//! | [`loss`] | the gated contrastive objective with gradients |
//! | [`trainer`] | batches, the per-step pipeline and the multi-round schedule |
//! | [`evaluator`] | multi-view descriptors and mAP |
//! | [`analytics`] | label-aware mining precision and curve export |
//! | [`ablation`] | the batch/memory mining variant grid |

pub mod ablation;
pub mod analytics;
pub mod candidates;
pub mod encoder;
mod error;
pub mod evaluator;
pub mod loss;
pub mod membank;
pub mod miner;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
