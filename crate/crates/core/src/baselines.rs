//! Reference quantizers used for comparison.

use std::fmt;
use std::str::FromStr;

use crate::backward::{backward_lqnet, backward_wnq, BackwardContext};
use crate::error::{Error, Result};
use crate::quantizer::{
    check_direct, fit_and_pack, max_abs, objective, quantize_filter, residual_quantize, FilterQuantization, QuantConfig,
};
use crate::tensor::{check_bits, code_value, QuantizedFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    Wnq,
    LqNet,
    Residual,
    DoReFa,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [MethodId::Wnq, MethodId::LqNet, MethodId::Residual, MethodId::DoReFa];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Wnq => "wnq",
            MethodId::LqNet => "lqnet",
            MethodId::Residual => "residual",
            MethodId::DoReFa => "dorefa",
        }
    }

    /// Whether the output is `alpha^T e` structured and fits in a WNQQ file.
    pub fn has_levels(self) -> bool {
        !matches!(self, MethodId::DoReFa)
    }

    /// Routes an upstream gradient through this method's backward rule.
    pub fn backward(self, ctx: &BackwardContext, upstream: &[f64]) -> Vec<f64> {
        match self {
            MethodId::Wnq => backward_wnq(ctx, upstream),
            MethodId::LqNet | MethodId::Residual | MethodId::DoReFa => backward_lqnet(ctx, upstream),
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Alternating quantization applied to the raw weights (no normalization).
///
/// The stored scale is 1 and `alpha` is in weight units; `warm_alpha` is too.
pub fn quantize_lqnet(w: &[f64], config: &QuantConfig, warm_alpha: Option<&[f64]>) -> Result<FilterQuantization> {
    check_direct(w, config, warm_alpha)?;
    if max_abs(w).1 == 0.0 {
        return Ok(FilterQuantization::degenerate(w, config.bits));
    }
    Ok(fit_and_pack(w, w, 1.0, config, warm_alpha))
}

/// Greedy residual binarization without alternation.
pub fn quantize_residual(w: &[f64], bits: usize) -> Result<FilterQuantization> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::EmptyFilter);
    }
    let (alpha, codes) = residual_quantize(w, bits);
    let filter = QuantizedFilter::pack(&alpha, &codes, 1.0)?;
    let values = codes.labels().iter().map(|&l| code_value(&alpha, l)).collect();
    let obj = objective(w, &alpha, &codes);
    Ok(FilterQuantization {
        filter,
        context: BackwardContext::new(w),
        values,
        objective: obj,
        history: vec![obj],
        negative_alpha: false,
    })
}

/// DoReFa grid value `2 q_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1`.
///
/// Rounding is half away from zero. The result lies on a fixed uniform grid
/// in `[-1, 1]` and is not rescaled.
pub fn quantize_dorefa(w: &[f64], bits: usize) -> Result<(Vec<f64>, BackwardContext)> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::EmptyFilter);
    }
    let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
    let tmax = t.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let ctx = BackwardContext::new(w);
    if tmax == 0.0 {
        return Ok((vec![0.0; w.len()], ctx));
    }
    let steps = ((1u32 << bits) - 1) as f64;
    let out = t
        .iter()
        .map(|&x| {
            let unit = x / (2.0 * tmax) + 0.5;
            2.0 * ((steps * unit).round() / steps) - 1.0
        })
        .collect();
    Ok((out, ctx))
}

/// Dequantized filter plus what backward needs, for any method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub values: Vec<f64>,
    pub context: BackwardContext,
    /// `None` for DoReFa.
    pub quantization: Option<FilterQuantization>,
}

/// Dispatches one filter to the chosen quantizer.
pub fn quantize_with(
    method: MethodId,
    w: &[f64],
    config: &QuantConfig,
    warm_alpha: Option<&[f64]>,
) -> Result<MethodOutput> {
    let q = match method {
        MethodId::Wnq => quantize_filter(w, config, warm_alpha)?,
        MethodId::LqNet => quantize_lqnet(w, config, warm_alpha)?,
        MethodId::Residual => quantize_residual(w, config.bits)?,
        MethodId::DoReFa => {
            let (values, context) = quantize_dorefa(w, config.bits)?;
            return Ok(MethodOutput {
                values,
                context,
                quantization: None,
            });
        }
    };
    Ok(MethodOutput {
        values: q.values.clone(),
        context: q.context.clone(),
        quantization: Some(q),
    })
}
