//! Backward rules for the quantizers.
//!
//! Projection uses the straight-through estimator (derivative 1) and the
//! rescaling multiplier is detached, so only the normalization divisor
//! contributes a non-trivial term. That term lands entirely on the max-abs
//! element:
//!
//! ```text
//! dL/dw_i = dL/dwq_i                               i != max
//! dL/dw_i = -sum_{j != i} dL/dwq_j * w_j / w_i     i == max
//! ```

use crate::error::{Error, Result};
use crate::quantizer::max_abs;

/// What the backward pass needs from the forward pass of one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardContext {
    pub saved_w: Vec<f64>,
    pub max_index: usize,
    pub degenerate: bool,
}

impl BackwardContext {
    pub fn new(w: &[f64]) -> Self {
        let (max_index, mav) = max_abs(w);
        Self {
            saved_w: w.to_vec(),
            max_index,
            degenerate: mav == 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.saved_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saved_w.is_empty()
    }
}

/// Gradient with respect to the max-abs normalized forward.
///
/// A degenerate (all-zero) filter passes the gradient through unchanged.
pub fn backward_wnq(ctx: &BackwardContext, upstream: &[f64]) -> Vec<f64> {
    assert_eq!(ctx.len(), upstream.len(), "gradient length must match filter");
    let mut out = upstream.to_vec();
    if ctx.degenerate {
        return out;
    }
    let i = ctx.max_index;
    out[i] = max_element_grad(ctx, upstream);
    out
}

/// `-sum_{j != i} g_j w_j / w_i` at the max-abs index `i`.
pub fn max_element_grad(ctx: &BackwardContext, upstream: &[f64]) -> f64 {
    let i = ctx.max_index;
    let wi = ctx.saved_w[i];
    let dot: f64 = ctx
        .saved_w
        .iter()
        .zip(upstream)
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, (w, g))| g * w)
        .sum();
    -dot / wi
}

/// Identity pass-through: the straight-through gradient without normalization.
pub fn backward_lqnet(_ctx: &BackwardContext, upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

/// Outcome of a finite-difference check on one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_deviation: f64,
    /// Index of the largest deviation.
    pub worst_index: usize,
}

/// Compares [`backward_wnq`] with central differences of
/// `L(v) = upstream . (c v / max|v|)`, where `c` is frozen at `max|w|`.
///
/// The max-abs element must beat every other magnitude by more than
/// `10 * eps`, otherwise the perturbation could move the maximum.
pub fn fd_check(w: &[f64], upstream: &[f64], eps: f64) -> Result<FdReport> {
    if w.is_empty() {
        return Err(Error::EmptyFilter);
    }
    if upstream.len() != w.len() {
        return Err(Error::Length {
            what: "upstream gradient",
            expected: w.len(),
            found: upstream.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (imax, mav) = max_abs(w);
    let runner_up = w
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != imax)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    let margin = mav - runner_up;
    if !(margin > 10.0 * eps) {
        return Err(Error::MarginTooSmall {
            margin,
            needed: 10.0 * eps,
        });
    }

    let scale = mav;
    let loss = |v: &[f64]| {
        let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        v.iter().zip(upstream).map(|(x, g)| g * scale * x / m).sum::<f64>()
    };

    let ctx = BackwardContext::new(w);
    let analytic = backward_wnq(&ctx, upstream);
    let mut probe = w.to_vec();
    let numeric: Vec<f64> = (0..w.len())
        .map(|i| {
            probe[i] = w[i] + eps;
            let plus = loss(&probe);
            probe[i] = w[i] - eps;
            let minus = loss(&probe);
            probe[i] = w[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect();
    let (worst_index, max_deviation) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .enumerate()
        .fold((0, 0.0f64), |best, (i, d)| if d > best.1 { (i, d) } else { best });
    Ok(FdReport {
        analytic,
        numeric,
        max_deviation,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wnq_example() {
        let ctx = BackwardContext::new(&[0.5, 0.2, -0.1]);
        let g = backward_wnq(&ctx, &[1.0, 2.0, 3.0]);
        assert!((g[0] + 0.2).abs() < 1e-15);
        assert_eq!(&g[1..], &[2.0, 3.0]);
    }

    #[test]
    fn wnq_negative_max() {
        let ctx = BackwardContext::new(&[-0.5, 0.2]);
        let g = backward_wnq(&ctx, &[1.0, 2.0]);
        assert!((g[0] - 0.8).abs() < 1e-15);
        assert_eq!(g[1], 2.0);
    }

    #[test]
    fn zero_upstream() {
        let ctx = BackwardContext::new(&[0.5, 0.2, -0.1]);
        assert_eq!(backward_wnq(&ctx, &[0.0; 3]), vec![0.0; 3]);
        assert_eq!(backward_lqnet(&ctx, &[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn lqnet_identity() {
        let ctx = BackwardContext::new(&[0.5, 0.2, -0.1]);
        assert_eq!(backward_lqnet(&ctx, &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn degenerate_passes_through() {
        let ctx = BackwardContext::new(&[0.0, 0.0]);
        assert!(ctx.degenerate);
        assert_eq!(backward_wnq(&ctx, &[1.5, -2.0]), vec![1.5, -2.0]);
    }

    #[test]
    fn single_element_has_zero_gradient() {
        let ctx = BackwardContext::new(&[0.7]);
        assert_eq!(backward_wnq(&ctx, &[3.0]), vec![0.0]);
        let r = fd_check(&[0.7], &[3.0], 1e-5).unwrap();
        assert_eq!(r.analytic, vec![0.0]);
        assert!(r.numeric[0].abs() < 1e-9);
    }

    #[test]
    fn fd_example() {
        let r = fd_check(&[0.5, 0.2, -0.1], &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(r.max_deviation < 1e-4, "{r:?}");
    }

    #[test]
    fn fd_rejects_ties_and_bad_eps() {
        assert!(matches!(
            fd_check(&[0.5, -0.5, 0.1], &[1.0; 3], 1e-5),
            Err(Error::MarginTooSmall { .. })
        ));
        assert!(fd_check(&[0.5, 0.1], &[1.0; 2], 0.0).is_err());
        assert!(fd_check(&[0.5, 0.1], &[1.0], 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn differs_only_at_max(
            w in proptest::collection::vec(-1.0f64..1.0, 1..16),
            g in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let ctx = BackwardContext::new(&w);
            let g = &g[..w.len()];
            let a = backward_wnq(&ctx, g);
            let b = backward_lqnet(&ctx, g);
            for i in 0..w.len() {
                if i != ctx.max_index || ctx.degenerate {
                    prop_assert_eq!(a[i], b[i]);
                }
            }
        }

        #[test]
        fn max_term_formula(
            w in proptest::collection::vec(-1.0f64..1.0, 2..16),
            g in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let ctx = BackwardContext::new(&w);
            prop_assume!(!ctx.degenerate);
            let g = &g[..w.len()];
            let out = backward_wnq(&ctx, g);
            let i = ctx.max_index;
            let dot: f64 = (0..w.len()).filter(|&j| j != i).map(|j| g[j] * w[j]).sum();
            prop_assert_eq!(out[i], -dot / w[i]);
        }
    }
}
