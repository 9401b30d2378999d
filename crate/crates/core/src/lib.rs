//! Kernel-level differentiable architecture search.
//!
//! Candidate depthwise kernels are sliced out of one maximal *meta kernel* by
//! centered probability masks. Because convolution is additive in its kernel,
//! the probability-weighted mixture of all candidates collapses into a single
//! effective kernel, so each searchable layer runs exactly one convolution
//! and stores one feature map, however many candidates it has.
//!
//! Crate layout:
//! - [`tensor`], [`conv`], [`autodiff`]: dense tensors, direct convolution and
//!   a define-by-run reverse-mode tape.
//! - [`meta_kernel`]: candidate sets, centered RoI masks and the effective kernel.
//! - [`sampler`]: softmax / Gumbel-softmax relaxation and temperature schedules.
//! - [`cost`]: multiply-accumulate accounting and the budget-band loss.
//! - [`supernet`], [`search`]: the searchable network, the joint weight and
//!   architecture update loop, and architecture derivation.
//! - [`harness`]: synthetic data, IDX ingestion, configuration, exports, CLI.

pub mod autodiff;
pub mod conv;
pub mod cost;
pub mod error;
pub mod harness;
pub mod meta_kernel;
pub mod parallel;
pub mod sampler;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
