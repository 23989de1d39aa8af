//! Desk-scale bimodal motion-language model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — reverse-mode autodiff over dense row-major tensors, with a
//!   finite-difference gradient checker as the correctness oracle.
//! - [`io`] — named-array checkpoint container (JSON index + raw LE blobs).
//! - [`corpus`] — synthetic motion-caption corpus: analytic clip generators,
//!   word-level tokenizer, instruction templates.
//! - [`nn`] — shared neural building blocks (linear, layer norm, attention,
//!   transformer blocks, parameter registry).
//! - [`vae`] — transformer motion VAE mapping variable-length clips to a
//!   compact continuous latent.
//! - [`backbone`] — dual-branch decoder-only transformer over hybrid
//!   text/motion sequences with per-layer shared or isolated attention.
//! - [`diffusion`] — conditional latent DDPM head: noise schedule, AdaLN
//!   denoiser, classifier-free guided ancestral sampler.
//! - [`train`] — AdamW with parameter-group freezing, staged training loops,
//!   loss composition and freeze verification.
//! - [`evalsuite`] — contrastive evaluator, retrieval/FID/diversity metrics,
//!   BLEU/ROUGE-L, template oracle, CSV reports and SVG charts.

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod io;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
