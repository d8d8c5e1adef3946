//! Word-level prosody codebooks, index prediction and prosody metrics.
//!
//! The crate covers a complete desk-scale pipeline:
//!
//! * [`corpus`] — a synthetic prosody corpus with ground-truth cluster labels,
//!   plus the binary feature format and JSONL manifests.
//! * [`vq`] — an EMA vector-quantization codebook with k-means seeding and
//!   usage monitoring.
//! * [`encoder`] — a prosody autoencoder that pools frames to word vectors and
//!   trains through the quantization bottleneck with a warm-up schedule.
//! * [`predictor`] — an autoregressive index predictor over word sequences
//!   with masked text pretraining, audio pretraining and fine-tuning stages.
//! * [`metrics`] — pitch DTW distance and KDE-smoothed duration KL divergence.
//! * [`pipeline`] — config-driven stage orchestration behind the `lpv` binary.
//!
//! Each capability has a runnable example under `examples/`; start with
//! `cargo run --example full_pipeline`.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod vq;

pub use error::{Error, Result};
pub use nn::Mat;
