//! Irreducible-curriculum pretraining: a small autodiff engine, a GPT-style
//! language model, learnability scoring with a proxy model, a curriculum
//! sampler, sharpness probes and run analysis.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod artifact;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod learnability;
pub mod model;
pub mod pipeline;
pub mod sharpness;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
