//! The attention-concentration patch attack and its CE-targeted baseline:
//! objective computation, constrained sign-gradient optimization with
//! oscillation-controlled step size, conflict-aware gradient aggregation,
//! distractor-swap scheduling, and candidate validation.

mod apgd;
mod objective;
mod pcgrad;
mod quantize;
mod runner;
mod tracker;

pub use apgd::{apgd_step, StepSizeState};
pub use objective::{
    adv_loss, adv_loss_reference, attention_mass, attention_mass_node, ce_loss,
    select_active_heads, select_tokens_timg, HeadSelection, ReferenceOutput,
};
pub use pcgrad::{pcgrad, project_conflicts};
pub use quantize::{quantize_patch, QuantizedPatch};
pub use runner::{
    captured_forward, end_to_end_fd_check, run_attack, validate_candidates, warm_start,
    write_run_log, AttackMethod, CandidateSummary, LogRecord, Phase, RunArtifacts, RunLog,
};
pub use tracker::{Candidate, CandidateTracker};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("unknown ablation flag {got:?}; valid flags: {valid}")]
    UnknownAblation { got: String, valid: &'static str },
    #[error("non-finite loss at iteration {iteration} ({phase:?})")]
    NonFiniteLoss { iteration: usize, phase: Phase },
    #[error("attention index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Vlm(#[from] crate::vlm::VlmError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// The six one-at-a-time ablation modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Plain gradient averaging instead of conflict-aware aggregation.
    pub avg_grad: bool,
    /// Skip the single-position warm start.
    pub no_init: bool,
    /// Optimize over all heads in all layers.
    pub no_head_active: bool,
    /// Optimize over all reference-output tokens.
    pub no_timg: bool,
    /// Restrict the objective to the second-to-last decoder layer.
    pub second_last_layer_only: bool,
    /// Drop the prior blank frame from the context.
    pub no_trajectory: bool,
}

pub const ABLATION_NAMES: &str =
    "avg_grad, no_init, no_head_active, no_timg, second_last_layer_only, no_trajectory";

impl AblationFlags {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name.to_ascii_lowercase().as_str() {
            "avg_grad" => self.avg_grad = true,
            "no_init" => self.no_init = true,
            "no_head_active" => self.no_head_active = true,
            "no_timg" => self.no_timg = true,
            "second_last_layer_only" => self.second_last_layer_only = true,
            "no_trajectory" => self.no_trajectory = true,
            other => {
                return Err(AttackError::UnknownAblation {
                    got: other.to_string(),
                    valid: ABLATION_NAMES,
                })
            }
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.avg_grad {
            out.push("avg_grad");
        }
        if self.no_init {
            out.push("no_init");
        }
        if self.no_head_active {
            out.push("no_head_active");
        }
        if self.no_timg {
            out.push("no_timg");
        }
        if self.second_last_layer_only {
            out.push("second_last_layer_only");
        }
        if self.no_trajectory {
            out.push("no_trajectory");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity budget.
    pub epsilon: f32,
    pub n_iter: usize,
    pub n_iter_init: usize,
    /// Distractor swap interval K.
    pub swap_interval: usize,
    /// Top-p mass fraction for output-token selection.
    pub p_img: f32,
    /// Active-head threshold.
    pub alpha_act: f32,
    /// Numeric guard added to the ratio's denominator and log argument.
    pub guard: f32,
    /// Initial step size for both attack methods.
    pub eta_init: f32,
    /// Candidate windows start at this fraction of the budget.
    pub candidate_window_start: f32,
    /// Held-out validation grids scored per candidate.
    pub validation_grids: usize,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub threads: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            n_iter: 2500,
            n_iter_init: 500,
            swap_interval: 50,
            p_img: 0.5,
            alpha_act: 0.05,
            guard: 1e-12,
            eta_init: 0.1,
            candidate_window_start: 0.6,
            validation_grids: 5,
            ablation: AblationFlags::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon {} outside (0,1)",
                self.epsilon
            )));
        }
        if !(self.p_img > 0.0 && self.p_img <= 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "p_img {} outside (0,1]",
                self.p_img
            )));
        }
        if !(0.0..1.0).contains(&self.alpha_act) {
            return Err(AttackError::InvalidConfig(format!(
                "alpha_act {} outside [0,1)",
                self.alpha_act
            )));
        }
        if self.n_iter_init > self.n_iter {
            return Err(AttackError::InvalidConfig(format!(
                "n_iter_init {} exceeds n_iter {}",
                self.n_iter_init, self.n_iter
            )));
        }
        if self.swap_interval == 0 || self.n_iter == 0 {
            return Err(AttackError::InvalidConfig(
                "n_iter and swap_interval must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.candidate_window_start) {
            return Err(AttackError::InvalidConfig(format!(
                "candidate_window_start {} outside [0,1]",
                self.candidate_window_start
            )));
        }
        Ok(())
    }

    /// Warm-start length: the configured value, or floor(n_iter / n_slots)
    /// when unset by the caller.
    pub fn warm_steps(&self, n_slots: usize) -> usize {
        if self.n_iter_init > 0 {
            self.n_iter_init
        } else {
            self.n_iter / n_slots
        }
    }
}

#[cfg(test)]
mod tests;
