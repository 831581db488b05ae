//! Projected sign-gradient ascent with oscillation-triggered step-size
//! halving: checkpoint fractions with shrinking gaps, improvement fraction
//! rho = 0.75, halving on trigger, reset to the best-so-far iterate. No
//! momentum, no restarts.

pub const RHO: f32 = 0.75;

/// Step-size controller state for one optimization phase.
#[derive(Debug, Clone)]
pub struct StepSizeState {
    pub eta: f32,
    checkpoints: Vec<usize>,
    next_cp: usize,
    successes: usize,
    window_start: usize,
    best_loss: f32,
    best_at_last_cp: f32,
    eta_at_last_cp: f32,
    prev_loss: Option<f32>,
    /// Iterations at which a halving fired.
    pub halvings: Vec<usize>,
}

/// Checkpoint schedule: p_0 = 0, p_1 = 0.22,
/// p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06), scaled by n_iter.
fn checkpoint_schedule(n_iter: usize) -> Vec<usize> {
    let mut ps = vec![0.0f64, 0.22];
    while *ps.last().unwrap() < 1.0 {
        let k = ps.len();
        let next = ps[k - 1] + (ps[k - 1] - ps[k - 2] - 0.03).max(0.06);
        ps.push(next);
    }
    let mut cps: Vec<usize> = ps
        .iter()
        .skip(1)
        .map(|p| (p * n_iter as f64).ceil() as usize)
        .filter(|&w| w > 0 && w <= n_iter)
        .collect();
    cps.dedup();
    cps
}

impl StepSizeState {
    pub fn new(eta_init: f32, n_iter: usize) -> StepSizeState {
        StepSizeState {
            eta: eta_init,
            checkpoints: checkpoint_schedule(n_iter),
            next_cp: 0,
            successes: 0,
            window_start: 0,
            best_loss: f32::NEG_INFINITY,
            best_at_last_cp: f32::NEG_INFINITY,
            eta_at_last_cp: eta_init,
            prev_loss: None,
            halvings: Vec::new(),
        }
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    /// Feeds the loss observed at 0-based iteration `iter` (before the step
    /// is taken from it). Returns true when the oscillation check fires; eta
    /// is already halved on return and the caller must reset the iterate to
    /// the best so far.
    pub fn observe(&mut self, iter: usize, loss: f32) -> bool {
        if let Some(prev) = self.prev_loss {
            if loss > prev {
                self.successes += 1;
            }
        }
        self.prev_loss = Some(loss);
        if loss > self.best_loss {
            self.best_loss = loss;
        }

        let mut halved = false;
        if self.next_cp < self.checkpoints.len() && iter + 1 == self.checkpoints[self.next_cp] {
            let window = iter + 1 - self.window_start;
            let cond1 = (self.successes as f32) < RHO * window as f32;
            let cond2 =
                self.eta == self.eta_at_last_cp && self.best_loss == self.best_at_last_cp;
            if cond1 || cond2 {
                self.eta *= 0.5;
                self.halvings.push(iter);
                halved = true;
            }
            self.window_start = iter + 1;
            self.successes = 0;
            self.eta_at_last_cp = self.eta;
            self.best_at_last_cp = self.best_loss;
            self.next_cp += 1;
        }
        halved
    }
}

/// One ascent step: x'' = clamp(x' + eta * sign(g)) into the epsilon ball
/// around the clean patch intersected with [0,1]. sign(0) = 0: a
/// zero-gradient coordinate does not move.
pub fn apgd_step(x_adv: &[f32], grad: &[f32], eta: f32, x_clean: &[f32], epsilon: f32) -> Vec<f32> {
    debug_assert_eq!(x_adv.len(), grad.len());
    debug_assert_eq!(x_adv.len(), x_clean.len());
    x_adv
        .iter()
        .zip(grad.iter())
        .zip(x_clean.iter())
        .map(|((&xa, &g), &xc)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            project(xa + eta * s, xc, epsilon)
        })
        .collect()
}

/// Projection into B_inf(x_clean, epsilon) intersected with [0,1].
pub fn project(v: f32, x_clean: f32, epsilon: f32) -> f32 {
    v.clamp(x_clean - epsilon, x_clean + epsilon).clamp(0.0, 1.0)
}

/// Projects a whole patch; used for the random initialization.
pub fn project_patch(x: &[f32], x_clean: &[f32], epsilon: f32) -> Vec<f32> {
    x.iter()
        .zip(x_clean.iter())
        .map(|(&v, &c)| project(v, c, epsilon))
        .collect()
}
