//! Max-abs normalized quantization with learned levels.
//!
//! A filter `w` is divided by its maximum absolute value, each normalized
//! element is projected onto the level set `{alpha^T e : e in {-1,+1}^K}`,
//! and the result is multiplied back by the (detached) maximum. The level
//! parameters `alpha` and binary codes `B` are fit by alternating between a
//! per-element projection (codes given `alpha`) and a least-squares solve
//! (`alpha` given codes), warm-started from residual quantization.

use nalgebra::{DMatrix, DVector};

use crate::backward::BackwardContext;
use crate::error::{Error, Result};
use crate::tensor::{check_bits, code_value, Codes, FilterView, QuantizedFilter};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    /// Bit width `K`.
    pub bits: usize,
    /// Alternating iterations when starting from residual initialization.
    pub init_iters: usize,
    /// Alternating iterations when warm-started from a previous `alpha`.
    pub train_iters: usize,
    /// Stop once the objective decreases by less than this.
    pub tol: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            init_iters: 20,
            train_iters: 1,
            tol: 1e-8,
        }
    }
}

impl QuantConfig {
    pub fn with_bits(bits: usize) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.init_iters == 0 || self.train_iters == 0 {
            return Err(Error::Config("iteration budgets must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol must be nonnegative, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFilter {
    pub values: Vec<f64>,
    pub mav: f64,
    pub max_index: usize,
    pub degenerate: bool,
}

/// Index and magnitude of the first element attaining `max |w_i|`.
pub fn max_abs(w: &[f64]) -> (usize, f64) {
    let mut best = (0, 0.0f64);
    for (i, &v) in w.iter().enumerate() {
        if v.abs() > best.1 {
            best = (i, v.abs());
        }
    }
    best
}

pub fn normalize(w: &[f64]) -> NormalizedFilter {
    assert!(!w.is_empty(), "normalize needs at least one element");
    let (max_index, mav) = max_abs(w);
    if mav == 0.0 {
        return NormalizedFilter {
            values: vec![0.0; w.len()],
            mav,
            max_index,
            degenerate: true,
        };
    }
    NormalizedFilter {
        values: w.iter().map(|&v| v / mav).collect(),
        mav,
        max_index,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub value: f64,
    pub label: u8,
}

/// The `2^K` representable values under `alpha`, ascending.
///
/// Equal values keep lexicographic code order (-1 before +1).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    bits: usize,
    levels: Vec<Level>,
}

impl LevelSet {
    pub fn new(alpha: &[f64]) -> Self {
        let bits = alpha.len();
        assert!((1..=crate::tensor::MAX_BITS).contains(&bits), "bit width out of range");
        let mut levels: Vec<Level> = (0..1u16 << bits)
            .map(|l| {
                let label = l as u8;
                Level {
                    value: code_value(alpha, label),
                    label,
                }
            })
            .collect();
        levels.sort_by(|a, b| a.value.total_cmp(&b.value));
        Self { bits, levels }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Nearest level to `x`; equal distances go to the larger value, equal
    /// values to the earliest code.
    pub fn project(&self, x: f64) -> Level {
        let lv = &self.levels;
        let dist = |j: usize| (x - lv[j].value).abs();
        let first_of = |mut j: usize| {
            while j > 0 && lv[j - 1].value == lv[j].value {
                j -= 1;
            }
            j
        };
        let idx = lv.partition_point(|l| l.value < x);
        let upper = (idx < lv.len()).then(|| {
            // Rounding can make two distinct upper levels equidistant from x;
            // the larger one wins.
            let d = dist(idx);
            let mut j = idx;
            while j + 1 < lv.len() && dist(j + 1) == d {
                j += 1;
            }
            first_of(j)
        });
        let lower = (idx > 0).then(|| first_of(idx - 1));
        let pick = match (lower, upper) {
            (Some(lo), Some(hi)) => {
                if dist(hi) <= dist(lo) {
                    hi
                } else {
                    lo
                }
            }
            (None, Some(hi)) => hi,
            (Some(lo), None) => lo,
            (None, None) => unreachable!("level set is never empty"),
        };
        lv[pick]
    }
}

pub fn level_set(alpha: &[f64]) -> LevelSet {
    LevelSet::new(alpha)
}

pub fn project(x: f64, levels: &LevelSet) -> Level {
    levels.project(x)
}

/// Codes of the nearest level for every element.
pub fn optimize_codes(values: &[f64], alpha: &[f64]) -> Codes {
    let levels = LevelSet::new(alpha);
    let labels = values.iter().map(|&x| levels.project(x).label).collect();
    Codes::new(alpha.len(), labels).expect("labels come from a valid level set")
}

/// Least-squares `alpha` minimizing `||values - B alpha||^2` for fixed codes.
///
/// Solves the `K x K` normal equations through a pseudo-inverse, which yields
/// the minimum-norm solution when `B^T B` is singular.
pub fn optimize_alpha(values: &[f64], codes: &Codes) -> Vec<f64> {
    let k = codes.bits();
    assert_eq!(values.len(), codes.len(), "codes and values disagree on M");
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (i, &v) in values.iter().enumerate() {
        for a in 0..k {
            let sa = codes.sign(i, a);
            rhs[a] += sa * v;
            for b in a..k {
                gram[(a, b)] += sa * codes.sign(i, b);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    if k == 1 {
        return vec![rhs[0] / gram[(0, 0)]];
    }
    // Full rank: Cholesky keeps the solve accurate to a few ulp.
    let diag_max = (0..k).map(|a| gram[(a, a)]).fold(0.0, f64::max);
    if let Some(chol) = gram.clone().cholesky() {
        let l = chol.l_dirty();
        let pivot_min = (0..k).map(|a| l[(a, a)] * l[(a, a)]).fold(f64::INFINITY, f64::min);
        if pivot_min > 1e-9 * diag_max {
            return chol.solve(&rhs).iter().copied().collect();
        }
    }
    // Rank deficient: pseudo-inverse through the symmetric eigendecomposition.
    // nalgebra's general SVD misreports singular values on some of these Gram
    // matrices (repeated code columns), so it is not used here.
    let eig = gram.symmetric_eigen();
    let cutoff = eig.eigenvalues.amax() * 1e-9;
    let proj = eig.eigenvectors.transpose() * rhs;
    let mut scaled = DVector::<f64>::zeros(k);
    for j in 0..k {
        let lambda = eig.eigenvalues[j];
        if lambda > cutoff {
            scaled[j] = proj[j] / lambda;
        }
    }
    (eig.eigenvectors * scaled).iter().copied().collect()
}

/// Greedy residual quantization: per-bit scale and sign of the remaining error.
///
/// Returns the scales and the stage-wise sign codes; `sign(0)` is +1.
pub fn residual_quantize(values: &[f64], bits: usize) -> (Vec<f64>, Codes) {
    assert!(!values.is_empty());
    let m = values.len() as f64;
    let mut residual = values.to_vec();
    let mut alpha = Vec::with_capacity(bits);
    let mut labels = vec![0u8; values.len()];
    for _ in 0..bits {
        let a = residual.iter().map(|r| r.abs()).sum::<f64>() / m;
        for (r, label) in residual.iter_mut().zip(labels.iter_mut()) {
            let positive = *r >= 0.0;
            *label = (*label << 1) | u8::from(positive);
            *r -= if positive { a } else { -a };
        }
        alpha.push(a);
    }
    let codes = Codes::new(bits, labels).expect("bits validated by caller");
    (alpha, codes)
}

pub fn residual_init(values: &[f64], bits: usize) -> Vec<f64> {
    residual_quantize(values, bits).0
}

/// `||values - B alpha||^2`.
pub fn objective(values: &[f64], alpha: &[f64], codes: &Codes) -> f64 {
    values
        .iter()
        .zip(codes.labels())
        .map(|(&v, &l)| {
            let d = v - code_value(alpha, l);
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alternation {
    pub alpha: Vec<f64>,
    /// Projection of every element onto the final level set.
    pub codes: Codes,
    /// Objective of the final `alpha` with `codes`.
    pub objective: f64,
    /// Objective at the warm start, then after each completed iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Set when some `alpha_k` came out negative.
    pub negative_alpha: bool,
}

/// Alternates code projection and least-squares `alpha` updates.
///
/// Runs at most `max_iters` rounds, stopping early when a round lowers the
/// objective by less than `tol`.
pub fn alternate(values: &[f64], alpha0: &[f64], max_iters: usize, tol: f64) -> Alternation {
    let mut alpha = alpha0.to_vec();
    let mut codes = optimize_codes(values, &alpha);
    let mut history = vec![objective(values, &alpha, &codes)];
    let mut iterations = 0;
    while iterations < max_iters {
        if iterations > 0 {
            codes = optimize_codes(values, &alpha);
        }
        alpha = optimize_alpha(values, &codes);
        let obj = objective(values, &alpha, &codes);
        let prev = *history.last().unwrap();
        history.push(obj);
        iterations += 1;
        if prev - obj < tol {
            break;
        }
    }
    let codes = optimize_codes(values, &alpha);
    let objective = objective(values, &alpha, &codes);
    let negative_alpha = alpha.iter().any(|&a| a < 0.0);
    Alternation {
        alpha,
        codes,
        objective,
        history,
        iterations,
        negative_alpha,
    }
}

/// Result of quantizing one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterQuantization {
    pub filter: QuantizedFilter,
    pub context: BackwardContext,
    /// Dequantized weights `w^q`.
    pub values: Vec<f64>,
    /// Fit objective in the space the levels were fit in.
    pub objective: f64,
    pub history: Vec<f64>,
    pub negative_alpha: bool,
}

impl FilterQuantization {
    pub fn alpha(&self) -> &[f64] {
        self.filter.alpha()
    }

    pub(crate) fn degenerate(w: &[f64], bits: usize) -> Self {
        let m = w.len();
        let codes = Codes::filled(bits, m, ((1u16 << bits) - 1) as u8);
        let alpha = vec![0.0; bits];
        Self {
            filter: QuantizedFilter::pack(&alpha, &codes, 0.0).expect("valid degenerate filter"),
            context: BackwardContext::new(w),
            values: vec![0.0; m],
            objective: 0.0,
            history: vec![0.0],
            negative_alpha: false,
        }
    }
}

fn check_filter(w: &[f64], config: &QuantConfig, warm_alpha: Option<&[f64]>) -> Result<()> {
    config.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyFilter);
    }
    if let Some(a) = warm_alpha {
        if a.len() != config.bits {
            return Err(Error::Length {
                what: "warm-start alpha",
                expected: config.bits,
                found: a.len(),
            });
        }
    }
    Ok(())
}

/// Fits levels to `values` (warm or residual start) and packs the result
/// with scale `mav`.
pub(crate) fn fit_and_pack(
    w: &[f64],
    values: &[f64],
    mav: f64,
    config: &QuantConfig,
    warm_alpha: Option<&[f64]>,
) -> FilterQuantization {
    let (alpha0, iters) = match warm_alpha {
        Some(a) => (a.to_vec(), config.train_iters),
        None => (residual_init(values, config.bits), config.init_iters),
    };
    let alt = alternate(values, &alpha0, iters, config.tol);
    let filter = QuantizedFilter::pack(&alt.alpha, &alt.codes, mav).expect("validated config");
    let out = alt
        .codes
        .labels()
        .iter()
        .map(|&l| mav * code_value(&alt.alpha, l))
        .collect();
    FilterQuantization {
        filter,
        context: BackwardContext::new(w),
        values: out,
        objective: alt.objective,
        history: alt.history,
        negative_alpha: alt.negative_alpha,
    }
}

/// Normalize, fit levels and project, then rescale by the detached max-abs.
///
/// `warm_alpha` is in normalized units. An all-zero filter quantizes to zeros
/// with `alpha = 0`.
pub fn quantize_filter(w: &[f64], config: &QuantConfig, warm_alpha: Option<&[f64]>) -> Result<FilterQuantization> {
    check_filter(w, config, warm_alpha)?;
    let norm = normalize(w);
    if norm.degenerate {
        return Ok(FilterQuantization::degenerate(w, config.bits));
    }
    Ok(fit_and_pack(w, &norm.values, norm.mav, config, warm_alpha))
}

/// Same as [`quantize_filter`] on a tensor view.
pub fn quantize_view(
    view: FilterView<'_>,
    config: &QuantConfig,
    warm_alpha: Option<&[f64]>,
) -> Result<FilterQuantization> {
    quantize_filter(view.values, config, warm_alpha)
}

pub(crate) fn check_direct(w: &[f64], config: &QuantConfig, warm_alpha: Option<&[f64]>) -> Result<()> {
    check_filter(w, config, warm_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&[0.2, -0.5, 0.1]);
        assert_eq!(n.mav, 0.5);
        assert_eq!(n.max_index, 1);
        assert!(!n.degenerate);
        assert!(close(n.values[0], 0.4, 1e-15));
        assert_eq!(n.values[1], -1.0);
        assert!(close(n.values[2], 0.2, 1e-15));

        let z = normalize(&[0.0, 0.0, 0.0]);
        assert!(z.degenerate);
        assert_eq!(z.mav, 0.0);
        assert_eq!(z.values, vec![0.0; 3]);

        let s = normalize(&[3.0]);
        assert_eq!((s.values[0], s.mav, s.max_index), (1.0, 3.0, 0));
    }

    #[test]
    fn max_index_takes_first_occurrence() {
        let n = normalize(&[0.1, -0.7, 0.7, -0.7]);
        assert_eq!(n.max_index, 1);
    }

    #[test]
    fn level_set_examples() {
        let v = |a: &[f64]| -> Vec<f64> { level_set(a).levels().iter().map(|l| l.value).collect() };
        assert_eq!(v(&[0.5]), vec![-0.5, 0.5]);
        assert_eq!(v(&[0.5, 0.25]), vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(v(&[0.75, 0.25]), vec![-1.0, -0.5, 0.5, 1.0]);
        let labels: Vec<u8> = level_set(&[0.5]).levels().iter().map(|l| l.label).collect();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn level_set_duplicates_keep_code_order() {
        // alpha = [0.5, 0.5]: codes (-,+) and (+,-) both give 0.
        let ls = level_set(&[0.5, 0.5]);
        let lv = ls.levels();
        assert_eq!(lv[1].value, 0.0);
        assert_eq!(lv[2].value, 0.0);
        assert_eq!((lv[1].label, lv[2].label), (0b01, 0b10));
        assert_eq!(ls.project(0.0).label, 0b01);
        assert_eq!(ls.project(0.1).label, 0b01);
    }

    #[test]
    fn project_examples() {
        let two = level_set(&[0.5]);
        assert_eq!(two.project(0.3).value, 0.5);
        assert_eq!(two.project(0.0).value, 0.5);
        let four = level_set(&[0.5, 0.25]);
        assert_eq!(four.project(-0.6).value, -0.75);
        assert_eq!(four.project(0.5).value, 0.75);
        assert_eq!(four.project(-0.5).value, -0.25);
        assert_eq!(four.project(10.0).value, 0.75);
        assert_eq!(four.project(-10.0).value, -0.75);
    }

    #[test]
    fn optimize_alpha_examples() {
        let c = Codes::from_signs(1, &[1, -1]).unwrap();
        assert!(close(optimize_alpha(&[0.8, -0.4], &c)[0], 0.6, 1e-15));
        let w = [1.0, 0.9, -0.2, 0.1];
        let c = Codes::from_signs(1, &[1, 1, -1, 1]).unwrap();
        assert!(close(optimize_alpha(&w, &c)[0], 0.55, 1e-15));
    }

    #[test]
    fn optimize_alpha_singular_is_min_norm() {
        // Both code columns identical: any alpha1 + alpha2 = t fits; min norm splits evenly.
        let c = Codes::from_signs(2, &[1, 1, -1, -1, 1, 1]).unwrap();
        let a = optimize_alpha(&[0.6, -0.2, 0.4], &c);
        let t = (0.6 + 0.2 + 0.4) / 3.0;
        assert!(close(a[0], t / 2.0, 1e-12), "{a:?}");
        assert!(close(a[1], t / 2.0, 1e-12), "{a:?}");
    }

    #[test]
    fn optimize_alpha_more_bits_than_elements() {
        // Columns 1..8 coincide; the fit is still exact.
        let mut signs = vec![1i8];
        signs.extend([-1i8; 7]);
        signs.extend([-1i8; 8]);
        let c = Codes::from_signs(8, &signs).unwrap();
        let w = [0.5911, -1.0];
        let a = optimize_alpha(&w, &c);
        assert!(objective(&w, &a, &c) < 1e-24, "{a:?}");
        assert!(close(a[0], 0.79555, 1e-12));
        for &x in &a[1..] {
            assert!(close(x, 0.20445 / 7.0, 1e-12), "{a:?}");
        }
    }

    #[test]
    fn optimize_codes_examples() {
        let c = optimize_codes(&[0.4, -1.0], &[0.5, 0.25]);
        assert_eq!(c.to_signs(), vec![1, -1, -1, -1]);
    }

    #[test]
    fn residual_init_examples() {
        let a = residual_init(&[1.0, 0.9, -0.2, 0.1], 2);
        assert!(close(a[0], 0.55, 1e-15));
        assert!(close(a[1], 0.40, 1e-15));
        assert_eq!(residual_init(&[0.3; 5], 1), vec![0.3]);
        assert_eq!(residual_init(&[0.0; 4], 3), vec![0.0; 3]);
        let (_, codes) = residual_quantize(&[1.0, 0.9, -0.2, 0.1], 2);
        // stage 2 residuals [0.45, 0.35, 0.35, -0.45]
        assert_eq!(codes.to_signs(), vec![1, 1, 1, 1, -1, 1, 1, -1]);
    }

    #[test]
    fn one_bit_fixed_point() {
        let w = [0.3, -0.9, 0.05, -0.2, 0.6];
        let alt = alternate(&w, &residual_init(&w, 1), 20, 1e-8);
        assert_eq!(alt.iterations, 1);
        let mean_abs = w.iter().map(|v: &f64| v.abs()).sum::<f64>() / 5.0;
        assert!(close(alt.alpha[0], mean_abs, 1e-15));
        assert_eq!(alt.codes.to_signs(), vec![1, -1, 1, -1, 1]);
    }

    #[test]
    fn quantize_filter_one_bit_example() {
        let q = quantize_filter(&[0.2, -0.5, 0.1], &QuantConfig::with_bits(1), None).unwrap();
        let a = (0.4 + 1.0 + 0.2) / 3.0;
        assert!(close(q.alpha()[0], a, 1e-15));
        let expect = [0.5 * a, -0.5 * a, 0.5 * a];
        for (v, e) in q.values.iter().zip(expect) {
            assert!(close(*v, e, 1e-15));
        }
        assert!(close(q.values[0], 0.266_666_666_666_666_7, 1e-15));
        assert_eq!(q.filter.unpack(), q.values);
        assert_eq!(q.context.max_index, 1);
    }

    #[test]
    fn quantize_filter_zero() {
        let q = quantize_filter(&[0.0; 3], &QuantConfig::default(), None).unwrap();
        assert_eq!(q.values, vec![0.0; 3]);
        assert_eq!(q.alpha(), &[0.0, 0.0]);
        assert!(q.context.degenerate);
    }

    #[test]
    fn quantize_filter_rejects_bad_input() {
        assert!(quantize_filter(&[], &QuantConfig::default(), None).is_err());
        let cfg = QuantConfig {
            bits: 9,
            ..Default::default()
        };
        assert!(matches!(
            quantize_filter(&[1.0], &cfg, None),
            Err(Error::BitsOutOfRange(9))
        ));
        let cfg = QuantConfig {
            init_iters: 0,
            ..Default::default()
        };
        assert!(quantize_filter(&[1.0], &cfg, None).is_err());
        assert!(quantize_filter(&[1.0], &QuantConfig::default(), Some(&[0.5])).is_err());
    }

    #[test]
    fn warm_start_uses_train_budget() {
        let w = [0.9, -0.3, 0.2, 0.75, -0.1, 0.05];
        let cfg = QuantConfig::default();
        let cold = quantize_filter(&w, &cfg, None).unwrap();
        let warm = quantize_filter(&w, &cfg, Some(&[0.5, 0.25])).unwrap();
        assert_eq!(warm.history.len(), 2);
        assert!(cold.history.len() >= 2);
    }

    fn filter_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 1..24)
    }

    proptest! {
        #[test]
        fn projection_idempotent(
            alpha in proptest::collection::vec(-1.0f64..1.0, 1..5),
            x in -2.0f64..2.0,
        ) {
            let ls = level_set(&alpha);
            let p = ls.project(x);
            prop_assert_eq!(ls.project(p.value).value, p.value);
        }

        #[test]
        fn alternation_monotone(w in filter_strategy(), bits in 1usize..5) {
            let alt = alternate(&w, &residual_init(&w, bits), 30, 0.0);
            for pair in alt.history.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12, "{:?}", alt.history);
            }
            prop_assert!(alt.objective <= *alt.history.last().unwrap() + 1e-12);
        }

        #[test]
        fn output_cardinality(w in filter_strategy(), bits in 1usize..4) {
            let q = quantize_filter(&w, &QuantConfig::with_bits(bits), None).unwrap();
            let mut distinct: Vec<f64> = q.values.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assert!(distinct.len() <= 1 << bits);
        }
    }
}
