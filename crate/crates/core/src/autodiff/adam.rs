//! Bias-corrected adaptive-moment optimizer used for victim training.

use super::{AutodiffError, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(param_sizes: &[usize], lr: f32) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameter groups. Gradient slices must match the
    /// sizes the state was built with.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "adam_step",
                msg: format!(
                    "expected {} parameter groups, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (gi, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if p.len() != self.m[gi].len() || g.len() != self.m[gi].len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![self.m[gi].len()],
                    rhs: vec![p.len(), g.len()],
                });
            }
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = vec![1.0f32, -2.0, 0.5];
        let mut st = AdamState::new(&[3], 0.1);
        let g = vec![0.0f32; 3];
        st.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update lr * g/|g| for constant g
        let mut w = vec![0.0f32];
        let mut st = AdamState::new(&[1], 0.1);
        st.step(&mut [&mut w], &[&[1.0f32]]).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-6, "w = {}", w[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // independent oracle: run the published recurrence directly
        let mut w = 0.0f32;
        let mut st = AdamState::new(&[1], 0.1);
        for _ in 0..100 {
            let g = 2.0 * (w - 3.0);
            let mut slice = [w];
            st.step(&mut [&mut slice], &[&[g]]).unwrap();
            w = slice[0];
        }
        assert!((w - 3.0).abs() < 0.5, "w = {w}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut w = vec![0.0f32; 2];
        let mut st = AdamState::new(&[3], 0.1);
        let g = vec![0.0f32; 2];
        assert!(st.step(&mut [&mut w], &[&g]).is_err());
    }
}
