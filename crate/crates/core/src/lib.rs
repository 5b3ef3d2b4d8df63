//! Per-domain LoRA adapters on a small next-token model, routed by a
//! contrastively trained text encoder and fused with an all-domain adapter at
//! decode time.
//!
//! Module map:
//! - [`matrix`], [`lora`]: dense kernels, adapters and weighted merging
//! - [`model`]: the toy language model, its gradients and training loops
//! - [`encoder`]: hashed-feature encoder and its contrastive training
//! - [`kmeans`], [`awg`]: domain signatures and per-input adapter weights
//! - [`fusion`]: specialised/generalised fusion and fused decoding
//! - [`corpus`], [`metrics`]: data handling and evaluation
//! - [`store`], [`config`], [`pipeline`]: artifacts and end-to-end runs

pub mod awg;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod kmeans;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod store;

pub use error::{Error, Result};
