//! Slice-level numeric kernels shared by the tape and the inference paths.
//!
//! Inference code and tape ops call the same kernels, so a value computed on
//! the tape and the same value computed without it agree bit-for-bit.

use std::f32::consts::PI;

/// `out[m, n] = a[m, k] · b[k, n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `grad_b[k, n] += a[m, k]^T · g[m, n]`
pub fn matmul_at_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, grad_b: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let gb_row = &mut grad_b[p * n..(p + 1) * n];
            for (o, &gv) in gb_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
}

/// `grad_a[m, k] += g[m, n] · b[k, n]^T`
pub fn matmul_bt_acc(g: &[f32], b: &[f32], m: usize, k: usize, n: usize, grad_a: &mut [f32]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let ga_row = &mut grad_a[i * k..(i + 1) * k];
        for (p, ga) in ga_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *ga += dot(g_row, b_row);
        }
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Adds `bias` to every row of `x` (row width = `bias.len()`).
pub fn add_rows(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `x[m, k] · w[k, n] + b[n]`
pub fn linear(x: &[f32], w: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul(x, w, m, k, n, &mut out);
    add_rows(&mut out, b);
    out
}

const GELU_C: f32 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let s = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let s = (2.0 / PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = s * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_inplace(x: &mut [f32]) {
    for v in x {
        *v = gelu(*v);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes one row in place, returning `(mean, 1/std)`.
pub fn layer_norm_row(row: &mut [f32], gamma: &[f32], beta: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
        let xhat = ((*v as f64 - mean) * rstd) as f32;
        *v = xhat * g + b;
    }
    (mean as f32, rstd as f32)
}

/// Softmax of one row in place; the normalizer is accumulated in f64.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        total += e as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / total) as f32;
    }
}

/// Log-softmax of one row, written into `out`.
pub fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let log_total = total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) as f64 - log_total) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f32> = (0..11).map(|i| i as f32).collect();
        assert_eq!(dot(&a, &a), (0..11).map(|i| (i * i) as f32).sum::<f32>());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut row = [0.0, 0.0];
        softmax_row(&mut row);
        assert_eq!(row, [0.5, 0.5]);
    }
}
