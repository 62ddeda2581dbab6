//! Raw numeric kernels over row-major slices.

use crate::parallel;

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[inline]
fn axpy_rows(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    for (p, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// `op(a)[m×k] · op(b)[k×n]`, where `op` optionally transposes the stored operand.
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<f64> {
    let a_owned;
    let a = if trans_a {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if trans_b {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut out = vec![0.0; m * n];
    parallel::for_each_row(&mut out, n, m * k * n, |i, row| {
        axpy_rows(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// Sequential single-matrix product, used inside batched kernels.
fn gemm_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        axpy_rows(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// Batched product over `batch` independent `[m×k]·[k×n]` problems.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    parallel::for_each_row(&mut out, m * n, batch * m * k * n, |bi, slot| {
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let b_s = &b[bi * k * n..(bi + 1) * k * n];
        let a_t;
        let a_s = if trans_a {
            a_t = transpose(a_s, k, m);
            &a_t[..]
        } else {
            a_s
        };
        let b_t;
        let b_s = if trans_b {
            b_t = transpose(b_s, n, k);
            &b_t[..]
        } else {
            b_s
        };
        gemm_serial(a_s, b_s, m, k, n, slot);
    });
    out
}

/// Numerically stable softmax of `row / temperature`, written into `out`.
pub(crate) fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `log softmax(row / temperature)`.
pub(crate) fn log_softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max) / temperature;
        sum += o.exp();
    }
    let lse = sum.ln();
    out.iter_mut().for_each(|o| *o -= lse);
}
