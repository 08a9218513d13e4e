//! Row-oriented numeric kernels shared by the eager tensor ops and the tape.
//!
//! Every kernel computes output row `i` from input row `i` only, and every
//! reduction runs in a fixed sequential order. Batched results therefore do not
//! depend on batch composition or padding length.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in index order.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let mut rows = c.chunks_exact_mut(n).zip(a.chunks_exact(k.max(1)));
    // Four output rows share each load of a `b` row.
    loop {
        let Some((c0, a0)) = rows.next() else { break };
        let Some((c1, a1)) = rows.next() else {
            row_acc(a0, b, c0, n);
            break;
        };
        let Some((c2, a2)) = rows.next() else {
            row_acc(a0, b, c0, n);
            row_acc(a1, b, c1, n);
            break;
        };
        let Some((c3, a3)) = rows.next() else {
            row_acc(a0, b, c0, n);
            row_acc(a1, b, c1, n);
            row_acc(a2, b, c2, n);
            break;
        };
        for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for ((((bv, y0), y1), y2), y3) in brow
                .iter()
                .zip(c0.iter_mut())
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
            {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
                *y2 += x2 * bv;
                *y3 += x3 * bv;
            }
        }
    }
}

#[inline]
fn row_acc(arow: &[f64], b: &[f64], crow: &mut [f64], n: usize) {
    for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stabilized.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Normalizes one row with population variance; returns `1/sqrt(var + eps)`.
pub fn layer_norm_row(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = gamma[i] * xhat[i] + beta[i];
    }
    inv_std
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_gemm_matches_naive_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (3, 2, 5), (4, 3, 2), (7, 5, 3), (9, 8, 11)] {
            let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.91).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(&a, &b, &mut c, m, k, n);
            assert_eq!(c, naive(&a, &b, m, k, n), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn tn_matches_transpose_then_gemm() {
        let (m, k, n) = (5, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 - 6.0).collect();
        let g: Vec<f64> = (0..m * n).map(|v| (v as f64).sqrt()).collect();
        let mut c = vec![0.0; k * n];
        gemm_tn_acc(&a, &g, &mut c, m, k, n);
        let at = transpose(&a, m, k);
        let expect = naive(&at, &g, k, m, n);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
