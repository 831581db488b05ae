//! Pairwise projection of conflicting gradients before averaging.

use crate::rng::RngState;

/// One randomized full pass over ordered pairs: whenever the running
/// gradient for position `i` has negative inner product with the raw
/// gradient of position `j`, it is projected onto `j`'s normal plane:
/// `g_i <- g_i - (g_i . g_j / |g_j|^2) g_j`.
pub fn project_conflicts(grads: &[Vec<f32>], rng: &mut RngState) -> Vec<Vec<f32>> {
    let n = grads.len();
    let dim = grads.first().map_or(0, |g| g.len());
    debug_assert!(grads.iter().all(|g| g.len() == dim));
    let mut adjusted: Vec<Vec<f32>> = grads.to_vec();
    let norms_sq: Vec<f64> = grads.iter().map(|g| dot(g, g)).collect();

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n.saturating_mul(n.saturating_sub(1)));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    rng.shuffle(&mut pairs);

    for (i, j) in pairs {
        if norms_sq[j] == 0.0 {
            continue; // a zero gradient cannot conflict; guard the division
        }
        let d = dot(&adjusted[i], &grads[j]);
        if d < 0.0 {
            let factor = (d / norms_sq[j]) as f32;
            let gi = &mut adjusted[i];
            let gj = &grads[j];
            for k in 0..dim {
                gi[k] -= factor * gj[k];
            }
            debug_assert!(dot(&adjusted[i], &grads[j]) >= -1e-6 * norms_sq[j].max(1.0));
        }
    }
    adjusted
}

/// Aggregates per-position gradients: conflict projection followed by the
/// mean. With `avg_grad` (or a single input) this is the plain mean of the
/// raw gradients.
pub fn pcgrad(grads: &[Vec<f32>], avg_grad: bool, rng: &mut RngState) -> Vec<f32> {
    assert!(!grads.is_empty());
    let dim = grads[0].len();
    if avg_grad || grads.len() == 1 {
        return mean(grads, dim);
    }
    let adjusted = project_conflicts(grads, rng);
    mean(&adjusted, dim)
}

fn mean(grads: &[Vec<f32>], dim: usize) -> Vec<f32> {
    if grads.len() == 1 {
        return grads[0].clone();
    }
    let inv = 1.0 / grads.len() as f32;
    let mut out = vec![0.0f32; dim];
    for g in grads {
        for (o, &v) in out.iter_mut().zip(g.iter()) {
            *o += v;
        }
    }
    for o in &mut out {
        *o *= inv;
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        s += *x as f64 * *y as f64;
    }
    s
}
