//! A miniature decoder-only multimodal transformer: the white-box victim.
//!
//! The model patchifies a scene canvas into vision tokens, runs causal
//! multi-head attention with optional per-head score capture, and decodes a
//! selection in one of two output formats: NAME emits `[SEL, product-id]`,
//! ACTION emits `[CLK, x-bin, y-bin]`.

pub mod checkpoint;
mod decode;
mod model;
mod train;
mod weights;

pub use decode::{greedy_decode, sample_decode, DecodeResult};
pub use model::{
    patchify, AttentionRecord, ForwardOutput, ImageSource, Model, PrefixCache, VisionTokenMap,
};
pub use train::{
    expected_output, holdout_accuracy, perturb_finetune, train_selection_task, TrainConfig,
    TrainReport,
};
pub use weights::ModelWeights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} exceeds max length {max}")]
    Overlength { len: usize, max: usize },
    #[error("adversarial mask may only be attached to the final image")]
    MaskOnNonFinalImage,
    #[error("{what}: extent mismatch, expected {expected:?}, got {got:?}")]
    ExtentMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("prefix cache mutated after caching")]
    PrefixMutated,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },
    #[error("fine-tune accuracy collapsed to {accuracy:.3}; retry with fewer steps")]
    AccuracyCollapse { accuracy: f64 },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

pub type Result<T> = std::result::Result<T, VlmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// `[SEL, product-id]` — the ReAct-thought analog.
    Name,
    /// `[CLK, x-bin, y-bin]` — the click-action analog.
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    /// Vision cell edge in pixels.
    pub patch: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub max_seq: usize,
    pub n_product_ids: usize,
    pub n_categories: usize,
    /// Coordinate-bin edge in pixels for the ACTION format.
    pub coord_bin: usize,
    pub output_format: OutputFormat,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffn_hidden: 128,
            patch: 8,
            canvas_h: 48,
            canvas_w: 240,
            max_seq: 384,
            n_product_ids: 64,
            n_categories: 10,
            coord_bin: 16,
            output_format: OutputFormat::Name,
        }
    }
}

impl ModelConfig {
    /// A much smaller stack for fast unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            ffn_hidden: 32,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(VlmError::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.canvas_h % self.patch != 0 || self.canvas_w % self.patch != 0 {
            return Err(VlmError::InvalidConfig(format!(
                "canvas {}x{} not divisible by patch {}",
                self.canvas_h, self.canvas_w, self.patch
            )));
        }
        if self.canvas_w % self.coord_bin != 0 || self.canvas_h % self.coord_bin != 0 {
            return Err(VlmError::InvalidConfig(format!(
                "canvas {}x{} not divisible by coord bin {}",
                self.canvas_h, self.canvas_w, self.coord_bin
            )));
        }
        if self.vocab_size() > 128 {
            return Err(VlmError::InvalidConfig(format!(
                "vocabulary of {} exceeds 128",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vision_rows(&self) -> usize {
        self.canvas_h / self.patch
    }

    pub fn vision_cols(&self) -> usize {
        self.canvas_w / self.patch
    }

    /// Vision tokens per image.
    pub fn tokens_per_image(&self) -> usize {
        self.vision_rows() * self.vision_cols()
    }

    pub fn coord_bins(&self) -> usize {
        (self.canvas_w / self.coord_bin).max(self.canvas_h / self.coord_bin)
    }

    pub fn vocab_size(&self) -> usize {
        tok::FIRST_CATEGORY + self.n_categories + 2 + self.n_product_ids + self.coord_bins()
    }

    // token-id layout
    pub fn cat_token(&self, c: usize) -> u32 {
        debug_assert!(c < self.n_categories);
        (tok::FIRST_CATEGORY + c) as u32
    }

    pub fn fmt_token(&self, f: OutputFormat) -> u32 {
        let base = tok::FIRST_CATEGORY + self.n_categories;
        (base + match f {
            OutputFormat::Name => 0,
            OutputFormat::Action => 1,
        }) as u32
    }

    pub fn id_token(&self, product: u32) -> u32 {
        debug_assert!((product as usize) < self.n_product_ids);
        (tok::FIRST_CATEGORY + self.n_categories + 2) as u32 + product
    }

    pub fn coord_token(&self, bin: usize) -> u32 {
        debug_assert!(bin < self.coord_bins());
        (tok::FIRST_CATEGORY + self.n_categories + 2 + self.n_product_ids + bin) as u32
    }

    pub fn token_as_product(&self, token: u32) -> Option<u32> {
        let first = (tok::FIRST_CATEGORY + self.n_categories + 2) as u32;
        let last = first + self.n_product_ids as u32;
        (first..last).contains(&token).then(|| token - first)
    }

    pub fn token_as_coord(&self, token: u32) -> Option<usize> {
        let first = (tok::FIRST_CATEGORY + self.n_categories + 2 + self.n_product_ids) as u32;
        let last = first + self.coord_bins() as u32;
        (first..last).contains(&token).then(|| (token - first) as usize)
    }

    /// Pixel center of a coordinate bin.
    pub fn bin_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.coord_bin as f64
    }

    pub fn pixel_to_bin(&self, px: f64) -> usize {
        (px / self.coord_bin as f64) as usize
    }
}

/// Fixed special-token ids.
pub mod tok {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const QRY: u32 = 2;
    pub const IMG: u32 = 3;
    pub const OUT: u32 = 4;
    pub const SEL: u32 = 5;
    pub const CLK: u32 = 6;
    pub const EOS: u32 = 7;
    pub const FIRST_CATEGORY: usize = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    Vision,
    Output,
}

/// Ordered token ids with role tags; roles partition the sequence and
/// output tags only appear after all inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn output_tokens(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .zip(self.roles.iter())
            .filter(|(_, r)| **r == Role::Output)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// What the victim is asked: a category query plus output-format selector
/// and whether the blank-browser prior frame precedes the scene image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuery {
    pub category_index: usize,
    pub format: OutputFormat,
    pub use_trajectory: bool,
}

/// Decode-only view of a victim; lets the evaluation harness run against
/// stub selectors in tests.
pub trait Selector {
    fn decode(
        &self,
        query: &SelectionQuery,
        canvas: &[f32],
        temperature: f32,
        rng: &mut crate::rng::RngState,
    ) -> Result<DecodeResult>;

    fn config(&self) -> &ModelConfig;
}

#[cfg(test)]
mod tests;
