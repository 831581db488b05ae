//! Matching and success scoring.

use serde::{Deserialize, Serialize};

use super::parse::{levenshtein, ParsedOutput};
use crate::scene::{BoundingBox, ProductSpec};

/// Per-product matching score: word overlap o, brand indicator b, the
/// thought score s = o*b, the position score p, and the combined max(s, p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub word_overlap: f64,
    pub brand_match: bool,
    pub s: f64,
    pub position: f64,
    pub combined: f64,
}

impl MatchScore {
    pub fn zero() -> MatchScore {
        MatchScore {
            word_overlap: 0.0,
            brand_match: false,
            s: 0.0,
            position: 0.0,
            combined: 0.0,
        }
    }
}

/// o: fraction of the product-name words present in the output
/// (case-insensitive exact word equality); b: some output word within edit
/// distance 1 of the brand. s = o*b, so a failed brand zeroes the score.
pub fn name_match(output_words: &[String], product: &ProductSpec) -> MatchScore {
    let lowered: Vec<String> = output_words.iter().map(|w| w.to_lowercase()).collect();
    let mut present = 0usize;
    for name_word in &product.name {
        let nw = name_word.to_lowercase();
        if lowered.iter().any(|w| *w == nw) {
            present += 1;
        }
    }
    let o = present as f64 / product.name.len() as f64;
    let brand = product.brand.to_lowercase();
    let b = lowered.iter().any(|w| levenshtein(w, &brand) <= 1);
    let s = if b { o } else { 0.0 };
    MatchScore {
        word_overlap: o,
        brand_match: b,
        s,
        position: 0.0,
        combined: s,
    }
}

/// 1 iff the click falls within the box; edges are inclusive.
pub fn coord_match(x: f64, y: f64, bbox: &BoundingBox) -> f64 {
    if x.is_finite() && y.is_finite() && bbox.contains(x, y) {
        1.0
    } else {
        0.0
    }
}

/// Full matching score of one displayed product against a parsed output:
/// thought path, position path, combined max(t, p). Action-only outputs
/// have t = 0.
pub fn match_score(parsed: &ParsedOutput, product: &ProductSpec, bbox: &BoundingBox) -> MatchScore {
    match parsed {
        ParsedOutput::Invalid => MatchScore::zero(),
        ParsedOutput::Name { words, click } => {
            let mut m = name_match(words, product);
            if let Some((x, y)) = click {
                m.position = coord_match(*x, *y, bbox);
            }
            m.combined = m.s.max(m.position);
            m
        }
        ParsedOutput::Coords { x, y } => {
            let p = coord_match(*x, *y, bbox);
            MatchScore {
                word_overlap: 0.0,
                brand_match: false,
                s: 0.0,
                position: p,
                combined: p,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessOutcome {
    Success,
    Failure,
    /// No parseable selection; excluded from the success rate.
    Invalid,
}

/// Success iff the target uniquely achieves the maximum combined score and
/// passes the threshold tau. Ties and sub-threshold scores fail; an invalid
/// parse invalidates the run.
pub fn success_score(
    parsed: &ParsedOutput,
    scores: &[MatchScore],
    target_index: usize,
    tau: f64,
) -> SuccessOutcome {
    if parsed.is_invalid() {
        return SuccessOutcome::Invalid;
    }
    let target = scores[target_index].combined;
    if target < tau {
        return SuccessOutcome::Failure;
    }
    for (i, sc) in scores.iter().enumerate() {
        if i != target_index && sc.combined >= target {
            return SuccessOutcome::Failure;
        }
    }
    SuccessOutcome::Success
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054f64;
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}
