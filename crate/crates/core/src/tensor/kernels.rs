//! Value-level compute kernels shared by graph forward and backward rules.
//!
//! All kernels accumulate into `out` (`out += ...`), so forward callers pass
//! zeroed buffers and backward callers can add straight into gradient
//! accumulators. Parallelism is over output rows only: every output element
//! is written by exactly one thread and its inner reduction order is fixed,
//! so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Row count below which the rayon dispatch overhead outweighs the work.
const PAR_MIN_ROWS: usize = 16;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let body = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn matmul_nt_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    // The dot-product form stalls on horizontal sums; past this size an
    // explicit transpose into the axpy-friendly layout wins. The path
    // choice depends on shape alone, so results stay reproducible.
    if m * k * n >= 1 << 15 {
        let mut bt = vec![0.0f32; k * n];
        for j in 0..n {
            for l in 0..k {
                bt[l * n + j] = b[j * k + l];
            }
        }
        matmul_acc(out, a, &bt, m, k, n);
        return;
    }
    let body = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_tn_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let body = |(l, out_row): (usize, &mut [f32])| {
        for i in 0..m {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    };
    if k >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

// Rational tanh approximation (the Eigen coefficients): auto-vectorizes
// where libm's tanhf cannot, absolute error under 1e-7 inside the clamp.
// `fast_tanh_f64` below must stay formula-identical — the f64 gradcheck
// replay differentiates the same function the f32 path computes.
const TANH_CLAMP: f32 = 7.905_311;
const TANH_ALPHA: [f32; 7] = [
    4.893_525e-3,
    6.372_619_3e-4,
    1.485_722_4e-5,
    5.122_297_1e-8,
    -8.604_671_5e-11,
    2.000_187_9e-13,
    -2.760_768_5e-16,
];
const TANH_BETA: [f32; 4] = [4.893_525_3e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];

#[inline(always)]
pub fn fast_tanh(x: f32) -> f32 {
    let x = x.clamp(-TANH_CLAMP, TANH_CLAMP);
    let x2 = x * x;
    let p = TANH_ALPHA[6];
    let p = p * x2 + TANH_ALPHA[5];
    let p = p * x2 + TANH_ALPHA[4];
    let p = p * x2 + TANH_ALPHA[3];
    let p = p * x2 + TANH_ALPHA[2];
    let p = p * x2 + TANH_ALPHA[1];
    let p = p * x2 + TANH_ALPHA[0];
    let p = p * x;
    let q = TANH_BETA[3];
    let q = q * x2 + TANH_BETA[2];
    let q = q * x2 + TANH_BETA[1];
    let q = q * x2 + TANH_BETA[0];
    p / q
}

#[inline(always)]
pub fn fast_tanh_f64(x: f64) -> f64 {
    let x = x.clamp(-(TANH_CLAMP as f64), TANH_CLAMP as f64);
    let x2 = x * x;
    let p = TANH_ALPHA[6] as f64;
    let p = p * x2 + TANH_ALPHA[5] as f64;
    let p = p * x2 + TANH_ALPHA[4] as f64;
    let p = p * x2 + TANH_ALPHA[3] as f64;
    let p = p * x2 + TANH_ALPHA[2] as f64;
    let p = p * x2 + TANH_ALPHA[1] as f64;
    let p = p * x2 + TANH_ALPHA[0] as f64;
    let p = p * x;
    let q = TANH_BETA[3] as f64;
    let q = q * x2 + TANH_BETA[2] as f64;
    let q = q * x2 + TANH_BETA[1] as f64;
    let q = q * x2 + TANH_BETA[0] as f64;
    p / q
}

/// Tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

/// Elementwise GELU storing tanh(u) for the backward rule; the tanh is by
/// far the dominant cost, so it is computed once.
pub fn gelu_forward(x: &[f32], out: &mut [f32], tanh_u: &mut [f32]) {
    const CHUNK: usize = 4096;
    let body = |(block, (out_c, tanh_c)): (usize, (&mut [f32], &mut [f32]))| {
        let xs = &x[block * CHUNK..block * CHUNK + out_c.len()];
        for i in 0..out_c.len() {
            let x = xs[i];
            let u = GELU_C * (x + GELU_A * x * x * x);
            let tu = fast_tanh(u);
            tanh_c[i] = tu;
            out_c[i] = 0.5 * x * (1.0 + tu);
        }
    };
    if x.len() >= 2 * CHUNK {
        out.par_chunks_mut(CHUNK)
            .zip_eq(tanh_u.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(i, p)| (i, p))
            .for_each(body);
    } else {
        out.chunks_mut(CHUNK).zip(tanh_u.chunks_mut(CHUNK)).enumerate().for_each(body);
    }
}

/// buf += g * gelu'(x), with tanh(u) already known.
pub fn gelu_backward_acc(buf: &mut [f32], g: &[f32], x: &[f32], tanh_u: &[f32]) {
    for i in 0..buf.len() {
        let t = tanh_u[i];
        let du = GELU_C * (1.0 + 3.0 * GELU_A * x[i] * x[i]);
        buf[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * du);
    }
}

pub fn gelu_deriv(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place row softmax with max subtraction. `valid[j] == false` columns
/// get probability exactly 0 and are excluded from the normalization.
/// Panics if a row has no valid column.
pub fn softmax_row_masked(row: &mut [f32], valid: &[bool]) {
    debug_assert_eq!(row.len(), valid.len());
    let mut max = f32::NEG_INFINITY;
    for (v, &ok) in row.iter().zip(valid) {
        if ok && *v > max {
            max = *v;
        }
    }
    assert!(max > f32::NEG_INFINITY, "softmax row with no valid column");
    let mut sum = 0.0f32;
    for (v, &ok) in row.iter_mut().zip(valid) {
        if ok {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place row softmax over all columns.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
