//! Per-filter low-bit weight quantization with learned quantization levels.
//!
//! Each filter is normalized by its maximum absolute value, quantized onto a
//! learned level set `{alpha^T e : e in {-1,+1}^K}` and rescaled by the
//! detached maximum. The backward pass routes an extra gradient term onto the
//! max-abs element of every filter, which pulls long distribution tails in
//! during quantization-aware training.
//!
//! Modules:
//! - [`tensor`] and [`format`]: weight tensors, filter views, bit-plane
//!   packing and the WNQT/WNQQ file formats.
//! - [`quantizer`]: normalization, level sets, projection and alternating
//!   optimization.
//! - [`backward`]: straight-through and max-abs backward rules, plus a
//!   finite-difference check.
//! - [`baselines`]: LQ-Net-style, residual and DoReFa quantizers.
//! - [`metrics`]: relative quantization error, histograms, tail statistics.
//! - [`train`]: a tiny deterministic training harness.

// NaN must fail these checks, hence `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backward;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod format;
pub mod metrics;
pub mod quantizer;
pub mod record;
pub mod tensor;
pub mod train;

pub use backward::{backward_lqnet, backward_wnq, fd_check, BackwardContext, FdReport};
pub use baselines::{quantize_dorefa, quantize_lqnet, quantize_residual, quantize_with, MethodId};
pub use error::{Error, Result};
pub use format::{read_quantized, read_tensor, write_quantized, write_tensor};
pub use metrics::{distribution_report, relative_mse, LayerReport};
pub use quantizer::{
    alternate, level_set, normalize, optimize_alpha, optimize_codes, project, quantize_filter, residual_init,
    FilterQuantization, QuantConfig,
};
pub use tensor::{
    pack_filter, unpack_filter, Codes, FilterView, LayerKind, QuantizedFilter, QuantizedLayer, WeightTensor,
};
