//! Small numerical kernels shared across the estimators.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::ArrayView2;

/// Probability clamp applied to every estimated probability.
pub const PROB_EPS: f64 = 1e-10;

/// Relative singular-value threshold used for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(xs)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities and returns their log normalizer.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

/// Clamps to `[eps, 1 - eps]` and renormalizes to the simplex.
pub fn normalize_simplex(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = x.max(PROB_EPS);
    }
    let s: f64 = xs.iter().sum();
    for x in xs.iter_mut() {
        *x /= s;
    }
}

pub fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Singular values of `a`, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Number of singular values above `RANK_TOL` times the largest.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = singular_values(a);
    match sv.first() {
        None => 0,
        Some(&top) if top <= 0.0 => 0,
        Some(&top) => sv.iter().filter(|&&s| s > RANK_TOL * top).count(),
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Condition number of a symmetric matrix from its eigenvalues.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    let ev = SymmetricEigen::new(sym).eigenvalues;
    let max = ev.iter().map(|e| e.abs()).fold(0.0, f64::max);
    let min = ev.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Outcome of a symmetric positive-definite inversion.
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    /// Ridge added to the diagonal, zero when the plain Cholesky succeeded.
    pub ridge: f64,
}

/// Inverts a symmetric positive (semi)definite matrix by Cholesky, retrying once with a
/// ridge of `1e-10` times the mean diagonal. Returns `None` when both attempts fail.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<SpdInverse> {
    let n = a.nrows();
    if n == 0 {
        return Some(SpdInverse {
            inverse: DMatrix::zeros(0, 0),
            ridge: 0.0,
        });
    }
    let sym = (a + a.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Some(SpdInverse {
            inverse: symmetrize(ch.inverse()),
            ridge: 0.0,
        });
    }
    let scale = (sym.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let ridge = 1e-10 * scale;
    let mut ridged = sym;
    for i in 0..n {
        ridged[(i, i)] += ridge;
    }
    ridged.cholesky().map(|ch| SpdInverse {
        inverse: symmetrize(ch.inverse()),
        ridge,
    })
}

pub fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Iterates over all permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}
