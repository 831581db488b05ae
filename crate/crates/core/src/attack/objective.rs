//! Attention-mass accounting, output-token and active-head selection, and
//! the two maximized losses.

use super::{AttackError, Result};
use crate::autodiff::{Tape, TensorId};
use crate::vlm::{AttentionRecord, ForwardOutput};

/// S: the (layer, head) pairs entering the objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSelection {
    pub pairs: Vec<(usize, usize)>,
    /// Set when a degenerate selection fell back to all heads.
    pub fallback: bool,
}

/// The reference output and its per-token visual-attention masses.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    /// T_ref token ids.
    pub tokens: Vec<u32>,
    /// Psi(t, V) summed over all heads and layers, one entry per token.
    pub psi_visual: Vec<f32>,
    /// Indices into `tokens` forming T_img (sorted ascending).
    pub t_img: Vec<usize>,
    pub all_zero_fallback: bool,
}

/// Psi^{h,l}(t, X): summed attention weight from global row `t` to the key
/// set `cols`, read out of the captured record.
pub fn attention_mass(
    tape: &Tape,
    record: &AttentionRecord,
    layer: usize,
    head: usize,
    t: usize,
    cols: &[usize],
) -> Result<f32> {
    check_indices(tape, record, layer, head, t, cols)?;
    let local = t - record.row_offset;
    let data = tape.data(record.alphas[layer][head]);
    let mut sum = 0.0f32;
    for &c in cols {
        sum += data[local * record.n_keys + c];
    }
    Ok(sum)
}

/// Differentiable counterpart of [`attention_mass`].
pub fn attention_mass_node(
    tape: &mut Tape,
    record: &AttentionRecord,
    layer: usize,
    head: usize,
    t: usize,
    cols: &[usize],
) -> Result<TensorId> {
    check_indices(tape, record, layer, head, t, cols)?;
    let local = t - record.row_offset;
    Ok(tape.row_subset_sum(record.alphas[layer][head], local, cols)?)
}

fn check_indices(
    tape: &Tape,
    record: &AttentionRecord,
    layer: usize,
    head: usize,
    t: usize,
    cols: &[usize],
) -> Result<()> {
    if layer >= record.n_layers() || head >= record.n_heads() {
        return Err(AttackError::IndexOutOfRange(format!(
            "(layer {layer}, head {head}) beyond ({}, {})",
            record.n_layers(),
            record.n_heads()
        )));
    }
    if t < record.row_offset {
        return Err(AttackError::IndexOutOfRange(format!(
            "row {t} precedes captured offset {}",
            record.row_offset
        )));
    }
    let rows = tape.shape(record.alphas[layer][head])[0];
    if t - record.row_offset >= rows {
        return Err(AttackError::IndexOutOfRange(format!(
            "row {t} beyond {} captured rows",
            rows
        )));
    }
    if let Some(&bad) = cols.iter().find(|&&c| c >= record.n_keys) {
        return Err(AttackError::IndexOutOfRange(format!(
            "key column {bad} beyond {} keys",
            record.n_keys
        )));
    }
    Ok(())
}

/// Per-token visual attention mass summed over every head and layer.
pub fn psi_visual_per_token(tape: &Tape, record: &AttentionRecord) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(record.output_rows.len());
    for &t in &record.output_rows {
        let mut total = 0.0f32;
        for l in 0..record.n_layers() {
            for h in 0..record.n_heads() {
                total += attention_mass(tape, record, l, h, t, &record.vision_map.vision_set)?;
            }
        }
        out.push(total);
    }
    Ok(out)
}

/// T_img: the smallest set of reference tokens whose summed visual
/// attention reaches `p_img` of the total, chosen greedily by descending
/// mass. Returns indices into the token list, sorted ascending, plus
/// whether the all-zero fallback fired.
pub fn select_tokens_timg(psi: &[f32], p_img: f32, no_timg: bool) -> (Vec<usize>, bool) {
    assert!(!psi.is_empty(), "empty reference output");
    let all: Vec<usize> = (0..psi.len()).collect();
    if no_timg {
        return (all, false);
    }
    let total: f64 = psi.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return (all, true);
    }
    let mut order: Vec<usize> = (0..psi.len()).collect();
    // descending by mass; ties resolved by token position for determinism
    order.sort_by(|&a, &b| {
        psi[b]
            .partial_cmp(&psi[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    // small relative slack so exact-boundary prefixes qualify despite f32
    // rounding of the masses
    let threshold = p_img as f64 * total * (1.0 - 1e-6);
    let mut cum = 0.0f64;
    let mut chosen = Vec::new();
    for &i in &order {
        chosen.push(i);
        cum += psi[i] as f64;
        if cum >= threshold {
            break;
        }
    }
    chosen.sort_unstable();
    (chosen, false)
}

/// S: (layer, head) pairs whose attention from T_img to the final image's
/// vision tokens strictly exceeds `alpha_act`.
pub fn select_active_heads(
    tape: &Tape,
    record: &AttentionRecord,
    t_img_rows: &[usize],
    alpha_act: f32,
    no_head_active: bool,
    second_last_layer_only: bool,
) -> Result<HeadSelection> {
    let n_layers = record.n_layers();
    let n_heads = record.n_heads();
    let all = |layers: std::ops::Range<usize>| -> Vec<(usize, usize)> {
        layers
            .flat_map(|l| (0..n_heads).map(move |h| (l, h)))
            .collect()
    };
    if second_last_layer_only {
        // all heads of the second-to-last decoder layer, no thresholding
        let l = n_layers.saturating_sub(2);
        return Ok(HeadSelection {
            pairs: all(l..l + 1),
            fallback: false,
        });
    }
    if no_head_active {
        return Ok(HeadSelection {
            pairs: all(0..n_layers),
            fallback: false,
        });
    }
    let mut pairs = Vec::new();
    for l in 0..n_layers {
        for h in 0..n_heads {
            let mut sum = 0.0f32;
            for &t in t_img_rows {
                sum += attention_mass(tape, record, l, h, t, &record.vision_map.vision_set)?;
            }
            if sum > alpha_act {
                pairs.push((l, h));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(HeadSelection {
            pairs: all(0..n_layers),
            fallback: true,
        });
    }
    Ok(HeadSelection {
        pairs,
        fallback: false,
    })
}

/// L_adv: mean over t in T_img and (l,h) in S of
/// log(Psi(t,P) / (Psi(t,V) + guard) + guard), as a differentiable node.
pub fn adv_loss(
    tape: &mut Tape,
    record: &AttentionRecord,
    t_img_rows: &[usize],
    heads: &HeadSelection,
    guard: f32,
) -> Result<TensorId> {
    assert!(!t_img_rows.is_empty() && !heads.pairs.is_empty());
    let p = record.vision_map.patch_set.clone();
    let v = record.vision_map.vision_set.clone();
    let mut acc: Option<TensorId> = None;
    for &t in t_img_rows {
        for &(l, h) in &heads.pairs {
            let psi_p = attention_mass_node(tape, record, l, h, t, &p)?;
            let psi_v = attention_mass_node(tape, record, l, h, t, &v)?;
            let den = tape.add_scalar(psi_v, guard);
            let ratio = tape.div(psi_p, den)?;
            let arg = tape.add_scalar(ratio, guard);
            let term = tape.ln(arg);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    let count = (t_img_rows.len() * heads.pairs.len()) as f32;
    Ok(tape.scale(acc.expect("nonempty objective"), 1.0 / count))
}

/// Straight-line f64 re-evaluation of the same objective from captured
/// attention values; the independent oracle for [`adv_loss`].
pub fn adv_loss_reference(
    tape: &Tape,
    record: &AttentionRecord,
    t_img_rows: &[usize],
    heads: &HeadSelection,
    guard: f32,
) -> Result<f64> {
    let mut total = 0.0f64;
    for &t in t_img_rows {
        for &(l, h) in &heads.pairs {
            let psi_p =
                attention_mass(tape, record, l, h, t, &record.vision_map.patch_set)? as f64;
            let psi_v =
                attention_mass(tape, record, l, h, t, &record.vision_map.vision_set)? as f64;
            total += (psi_p / (psi_v + guard as f64) + guard as f64).ln();
        }
    }
    Ok(total / (t_img_rows.len() * heads.pairs.len()) as f64)
}

/// L_CE: summed log-likelihood of the reference tokens under the current
/// logits; maximized by the baseline.
pub fn ce_loss(tape: &mut Tape, out: &ForwardOutput, t_ref: &[u32]) -> Result<TensorId> {
    assert!(!t_ref.is_empty());
    let first_predict = out.out_marker_row - out.row_offset;
    let rows = tape.slice_rows(out.logits, first_predict, t_ref.len())?;
    let logp = tape.log_softmax_rows(rows)?;
    let coords: Vec<(usize, usize)> = t_ref
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, t as usize))
        .collect();
    let picked = tape.gather2d(logp, &coords)?;
    Ok(tape.sum_all(picked))
}
