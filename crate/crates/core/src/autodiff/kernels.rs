//! Raw slice kernels shared by forward and backward passes.
//!
//! All reductions accumulate in f32 with a fixed ascending-index order so
//! repeated runs are bit-identical. Matmul kernels accumulate into `out`;
//! callers zero the buffer for a plain product.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[k,n] += a^T[k,m] * b[m,n] where `a` is stored (m,k).
pub fn matmul_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// Row-major transpose of an (rows, cols) matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Softmax over each row of an (rows, cols) matrix, restricted to the causal
/// window: row `i` may only attend to columns `j <= offset + i`. Masked
/// entries are exactly zero in the output.
pub fn causal_softmax(x: &[f32], rows: usize, cols: usize, offset: usize, out: &mut [f32]) {
    for i in 0..rows {
        let valid = cols.min(offset + i + 1);
        let row = &x[i * cols..i * cols + valid];
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for j in 0..valid {
            let e = (row[j] - max).exp();
            out_row[j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for j in 0..valid {
            out_row[j] *= inv;
        }
        for j in valid..cols {
            out_row[j] = 0.0;
        }
    }
}

/// Backward of [`causal_softmax`]: dx_j = y_j * (dy_j - sum_k dy_k y_k).
pub fn causal_softmax_backward(
    y: &[f32],
    dy: &[f32],
    rows: usize,
    cols: usize,
    offset: usize,
    dx: &mut [f32],
) {
    for i in 0..rows {
        let valid = cols.min(offset + i + 1);
        let y_row = &y[i * cols..i * cols + valid];
        let dy_row = &dy[i * cols..i * cols + valid];
        let mut dot = 0.0f32;
        for j in 0..valid {
            dot += dy_row[j] * y_row[j];
        }
        let dx_row = &mut dx[i * cols..i * cols + valid];
        for j in 0..valid {
            dx_row[j] += y_row[j] * (dy_row[j] - dot);
        }
    }
}

/// Log-softmax over each row.
pub fn log_softmax_rows(x: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out_row[j] = row[j] - lse;
        }
    }
}

pub const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
pub const GELU_A: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Per-row mean/variance normalization with affine parameters.
/// Returns (out, per-row mean, per-row inverse stddev) for the backward pass.
pub fn layer_norm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    rows: usize,
    d: usize,
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut out = vec![0.0; rows * d];
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = 0.0f32;
        for &v in row {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f32;
        let inv_std = 1.0 / (var + eps).sqrt();
        let out_row = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            out_row[j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
        means[i] = mean;
        inv_stds[i] = inv_std;
    }
    (out, means, inv_stds)
}
