//! Self-induction vision transformer for unsupervised visual anomaly
//! detection.
//!
//! A frozen CNN turns each image into a fused multi-scale feature map. The
//! map is cut into patch tokens and reconstructed by a transformer in which
//! every token is predicted from a hybrid sequence where its own position
//! has been replaced by a learnable induction token, so the model cannot
//! copy its input through. The residual between original and reconstructed
//! features gives a per-pixel anomaly map and an image-level score.
//!
//! Module map:
//!
//! - [`backbone`]: preprocessing and frozen feature extraction
//! - [`tokenizer`]: patch tokens and positional tables
//! - [`induction`]: partitions, hybrid sequences, latent reassembly
//! - [`model`]: encoder/decoder with explicit gradients, FLOP counts
//! - [`objective`]: loss, anomaly maps, smoothing, image scores
//! - [`metrics`]: AUROC and AP
//! - [`data`]: MVTec-layout indexing, synthetic corpus, batching
//! - [`train`] and [`pipeline`]: training, checkpoints, inference, evaluation

pub mod archive;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod induction;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod seed;
pub mod tokenizer;
pub mod train;

pub use config::ModelConfig;
pub use error::{Result, SivtError};
