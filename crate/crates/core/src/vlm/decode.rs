//! Greedy and temperature decoding.

use super::model::{ImageSource, Model};
use super::{tok, Result, Role, SelectionQuery, Selector, TokenSequence, VlmError};
use crate::autodiff::Tape;
use crate::rng::RngState;

const MAX_OUTPUT_TOKENS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    pub sequence: TokenSequence,
    /// No end token appeared within the format-length cap.
    pub truncated: bool,
}

impl DecodeResult {
    pub fn tokens(&self) -> &[u32] {
        &self.sequence.tokens
    }
}

/// Argmax decoding until the end token or the length cap; ties break toward
/// the lowest token id.
pub fn greedy_decode(model: &Model, query: &SelectionQuery, canvas: &[f32]) -> Result<DecodeResult> {
    let mut unused = RngState::new(0, "greedy-unused");
    sample_decode(model, query, canvas, 0.0, &mut unused)
}

/// Draws tokens from softmax(logits / temperature); temperature 0 is greedy.
pub fn sample_decode(
    model: &Model,
    query: &SelectionQuery,
    canvas: &[f32],
    temperature: f32,
    rng: &mut RngState,
) -> Result<DecodeResult> {
    if temperature < 0.0 {
        return Err(VlmError::InvalidConfig(format!(
            "negative temperature {temperature}"
        )));
    }
    let blank = model.blank_frame();
    let mut outputs: Vec<u32> = Vec::new();
    let mut truncated = false;
    loop {
        let mut tape = Tape::new();
        let images: Vec<ImageSource> = if query.use_trajectory {
            vec![ImageSource::Pixels(&blank), ImageSource::Pixels(canvas)]
        } else {
            vec![ImageSource::Pixels(canvas)]
        };
        let out = model.forward_full(&mut tape, query, &images, &outputs, false, false)?;
        let predict_row = if outputs.is_empty() {
            out.out_marker_row
        } else {
            *out.output_rows.last().expect("output rows")
        };
        let logits = out.logits_row(&tape, predict_row);
        let next = if temperature == 0.0 {
            argmax_lowest(logits)
        } else {
            sample_from(logits, temperature, rng)
        } as u32;
        if next == tok::EOS {
            break;
        }
        outputs.push(next);
        if outputs.len() >= MAX_OUTPUT_TOKENS {
            truncated = true;
            break;
        }
    }
    let roles = vec![Role::Output; outputs.len()];
    Ok(DecodeResult {
        sequence: TokenSequence {
            tokens: outputs,
            roles,
        },
        truncated,
    })
}

fn argmax_lowest(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) fn sample_from_for_tests(logits: &[f32], temperature: f32, rng: &mut RngState) -> usize {
    sample_from(logits, temperature, rng)
}

fn sample_from(logits: &[f32], temperature: f32, rng: &mut RngState) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 / temperature as f64).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

impl Selector for Model {
    fn decode(
        &self,
        query: &SelectionQuery,
        canvas: &[f32],
        temperature: f32,
        rng: &mut RngState,
    ) -> Result<DecodeResult> {
        sample_decode(self, query, canvas, temperature, rng)
    }

    fn config(&self) -> &super::ModelConfig {
        &self.config
    }
}
