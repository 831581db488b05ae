//! Per-window candidate tracking.
//!
//! Distractor swaps shift the loss scale, so losses are only comparable
//! within one swap window. From the configured fraction of the budget on,
//! the best iterate of each window is saved and later scored on held-out
//! validation grids.

#[derive(Debug, Clone)]
pub struct Candidate {
    pub patch: Vec<f32>,
    pub mean_loss: f32,
    pub iteration: usize,
    /// Swap version the candidate was observed under.
    pub window: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CandidateTracker {
    start_iter: usize,
    current_best: Option<Candidate>,
    pub candidates: Vec<Candidate>,
}

impl CandidateTracker {
    pub fn new(n_iter: usize, window_start_fraction: f32) -> CandidateTracker {
        // f32 fractions like 0.6 land a hair above the exact product; snap
        // to the integer when within rounding distance
        let raw = window_start_fraction as f64 * n_iter as f64;
        let start_iter = if (raw - raw.round()).abs() < 1e-6 * n_iter.max(1) as f64 {
            raw.round() as usize
        } else {
            raw.ceil() as usize
        };
        CandidateTracker {
            start_iter,
            current_best: None,
            candidates: Vec::new(),
        }
    }

    pub fn start_iter(&self) -> usize {
        self.start_iter
    }

    /// Offers an iterate; kept only from the window-start fraction onward
    /// and only if it beats the current window's best loss.
    pub fn observe(&mut self, iteration: usize, mean_loss: f32, patch: &[f32], window: u64) {
        if iteration < self.start_iter || !mean_loss.is_finite() {
            return;
        }
        let better = match &self.current_best {
            None => true,
            Some(c) => mean_loss > c.mean_loss,
        };
        if better {
            self.current_best = Some(Candidate {
                patch: patch.to_vec(),
                mean_loss,
                iteration,
                window,
            });
        }
    }

    /// Closes the running window at a swap boundary (or at the end of the
    /// run), moving its best iterate into the candidate set.
    pub fn close_window(&mut self) {
        if let Some(c) = self.current_best.take() {
            self.candidates.push(c);
        }
    }
}
