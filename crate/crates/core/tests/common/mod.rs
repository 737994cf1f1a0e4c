//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the quantizer internals: level values, nearest
//! levels and least-squares fits are recomputed from scratch.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sign of component `k` in code number `code`, where codes are numbered in
/// lexicographic order of their sign vectors (-1 before +1).
pub fn code_sign(code: usize, k: usize, bits: usize) -> f64 {
    if (code >> (bits - 1 - k)) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

pub fn code_signs(code: usize, bits: usize) -> Vec<f64> {
    (0..bits).map(|k| code_sign(code, k, bits)).collect()
}

/// `alpha^T e`, summed left to right.
pub fn level_value(alpha: &[f64], code: usize) -> f64 {
    let mut acc = 0.0;
    for (k, a) in alpha.iter().enumerate() {
        acc += a * code_sign(code, k, alpha.len());
    }
    acc
}

/// Nearest level by exhaustive scan over all codes in lexicographic order.
///
/// Ties in distance go to the larger value; equal values keep the first code.
pub fn brute_nearest(alpha: &[f64], x: f64) -> (f64, usize) {
    let n = 1usize << alpha.len();
    let mut best_code = 0;
    let mut best_v = level_value(alpha, 0);
    let mut best_d = (x - best_v).abs();
    for code in 1..n {
        let v = level_value(alpha, code);
        let d = (x - v).abs();
        if d < best_d || (d == best_d && v > best_v) {
            best_code = code;
            best_v = v;
            best_d = d;
        }
    }
    (best_v, best_code)
}

/// Solves `a x = b` (row-major `n x n`) by Gaussian elimination with full
/// pivoting. Returns the rank and a basic solution with free variables at 0.
pub fn solve_full_pivot(a: &[f64], b: &[f64], n: usize) -> (usize, Vec<f64>) {
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut row = a[r * n..(r + 1) * n].to_vec();
            row.push(b[r]);
            row
        })
        .collect();
    let mut col_perm: Vec<usize> = (0..n).collect();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let mut rank = 0;
    for step in 0..n {
        let mut piv = (step, step, 0.0f64);
        for r in step..n {
            for c in step..n {
                if m[r][c].abs() > piv.2 {
                    piv = (r, c, m[r][c].abs());
                }
            }
        }
        if piv.2 <= 1e-12 * scale {
            break;
        }
        m.swap(step, piv.0);
        for row in m.iter_mut() {
            row.swap(step, piv.1);
        }
        col_perm.swap(step, piv.1);
        for r in step + 1..n {
            let f = m[r][step] / m[step][step];
            for c in step..=n {
                m[r][c] -= f * m[step][c];
            }
        }
        rank += 1;
    }
    let mut y = vec![0.0; n];
    for r in (0..rank).rev() {
        let mut s = m[r][n];
        for c in r + 1..rank {
            s -= m[r][c] * y[c];
        }
        y[r] = s / m[r][r];
    }
    let mut x = vec![0.0; n];
    for (pos, &var) in col_perm.iter().enumerate() {
        x[var] = y[pos];
    }
    (rank, x)
}

/// Least-squares fit of `values ~ B alpha` through the normal equations.
/// `signs[i]` holds the K signs of row `i`.
pub fn lstsq(values: &[f64], signs: &[Vec<f64>]) -> (usize, Vec<f64>) {
    let k = signs[0].len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (row, &v) in signs.iter().zip(values) {
        for a in 0..k {
            rhs[a] += row[a] * v;
            for b in 0..k {
                gram[a * k + b] += row[a] * row[b];
            }
        }
    }
    solve_full_pivot(&gram, &rhs, k)
}

pub fn residual_sq(values: &[f64], signs: &[Vec<f64>], alpha: &[f64]) -> f64 {
    values
        .iter()
        .zip(signs)
        .map(|(v, row)| {
            let fit: f64 = row.iter().zip(alpha).map(|(s, a)| s * a).sum();
            (v - fit).powi(2)
        })
        .sum()
}

/// Global minimum of `||values - B alpha||^2` over every code matrix `B`,
/// with an exact least-squares `alpha` per matrix.
pub fn global_optimum(values: &[f64], bits: usize) -> f64 {
    let m = values.len();
    let per_row = 1usize << bits;
    let total = per_row.pow(m as u32);
    let mut best = f64::INFINITY;
    for idx in 0..total {
        let mut rest = idx;
        let signs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let code = rest % per_row;
                rest /= per_row;
                code_signs(code, bits)
            })
            .collect();
        let (_, alpha) = lstsq(values, &signs);
        best = best.min(residual_sq(values, &signs, &alpha));
    }
    best
}

/// Greedy residual binarization computed from its definition.
pub fn residual_reference(values: &[f64], bits: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut r = values.to_vec();
    let mut alpha = Vec::new();
    let mut signs = vec![Vec::new(); values.len()];
    for _ in 0..bits {
        let a = r.iter().map(|x| x.abs()).sum::<f64>() / r.len() as f64;
        for (x, row) in r.iter_mut().zip(signs.iter_mut()) {
            let s = if *x >= 0.0 { 1.0 } else { -1.0 };
            row.push(s);
            *x -= s * a;
        }
        alpha.push(a);
    }
    (alpha, signs)
}

pub fn random_filter(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Distance in units in the last place between two finite doubles.
pub fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

/// One ulp of `x`.
pub fn ulp_of(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return f64::from_bits(1);
    }
    f64::from_bits(x.to_bits() + 1) - x
}
