//! Diffusion-transformer lab: a small DiT with swappable attention, sparse
//! MoE, compression, distillation, cost accounting and evaluation metrics.

pub mod attention;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod trainer;

pub use config::{AttentionVariant, ModelConfig, MoeConfig};
pub use error::{Error, Result};
pub use model::DiTModel;
pub use numerics::{Tape, Tensor, Var};
pub use params::{ParamId, ParamKind, ParamStore};
