//! Slice-level kernels shared by the tape and the incremental decoder.
//!
//! Every kernel computes each output row from its own input row only, so a
//! row's result does not depend on how many rows are processed together.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_t_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn t_matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of one row with joint max subtraction.
pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = x.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + total.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - log_z;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes one row to zero mean / unit variance and applies `gain`, `bias`.
/// Returns the inverse standard deviation for the backward pass.
pub fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    normalized: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        normalized[i] = (x[i] - mean) * inv_std;
        out[i] = normalized[i] * gain[i] + bias[i];
    }
    inv_std
}

/// Causal attention for a single query row against `keys`/`values` rows
/// `0..=limit`, one head occupying columns `offset..offset+head_dim`.
/// Writes attention weights into `probs[..=limit]` and the head output
/// into `out[offset..offset+head_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    width: usize,
    offset: usize,
    head_dim: usize,
    limit: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = &query[offset..offset + head_dim];
    for j in 0..=limit {
        let k = &keys[j * width + offset..j * width + offset + head_dim];
        probs[j] = dot(q, k) * scale;
    }
    let scores = probs[..=limit].to_vec();
    softmax_row(&scores, &mut probs[..=limit]);
    let o = &mut out[offset..offset + head_dim];
    o.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..=limit {
        let v = &values[j * width + offset..j * width + offset + head_dim];
        let p = probs[j];
        for (dst, &src) in o.iter_mut().zip(v) {
            *dst += p * src;
        }
    }
}
