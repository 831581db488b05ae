//! Forward pass: patchification, causal multi-head attention with score
//! capture, and the prefix/suffix split used by the attack loop.

use super::weights::{ModelWeights, WeightNodes};
use super::{tok, ModelConfig, Result, SelectionQuery, VlmError};
use crate::autodiff::{Tape, TensorId};
use crate::rng::RngState;
use crate::scene::CANVAS_BG;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Model> {
        config.validate()?;
        Ok(Model { config, weights })
    }

    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Model> {
        config.validate()?;
        let weights = ModelWeights::init(&config, rng);
        Ok(Model { config, weights })
    }

    pub fn blank_frame(&self) -> Vec<f32> {
        vec![CANVAS_BG; self.config.canvas_h * self.config.canvas_w * 3]
    }
}

/// An image entering the context: constant pixels, or a tape node carrying
/// gradients (final image only) with an optional adversarial-region mask.
pub enum ImageSource<'a> {
    Pixels(&'a [f32]),
    Node {
        canvas: TensorId,
        mask: Option<&'a [bool]>,
    },
}

/// Grid-to-sequence index map for the final scene image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionTokenMap {
    pub rows: usize,
    pub cols: usize,
    /// (row * cols + col) -> global sequence index.
    pub grid: Vec<usize>,
    /// P: sequence indices of cells overlapping the adversarial region.
    pub patch_set: Vec<usize>,
    /// V: all vision indices of the final image.
    pub vision_set: Vec<usize>,
}

/// Per-layer, per-head attention matrices captured during a forward pass,
/// with the index maps needed to read masses out of them.
pub struct AttentionRecord {
    /// [layer][head] -> (local rows, keys) attention node on the tape.
    pub alphas: Vec<Vec<TensorId>>,
    /// Global sequence index of local row 0.
    pub row_offset: usize,
    pub n_keys: usize,
    pub vision_map: VisionTokenMap,
    /// Global rows of the teacher-forced output tokens.
    pub output_rows: Vec<usize>,
}

impl AttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.alphas.len()
    }

    pub fn n_heads(&self) -> usize {
        self.alphas.first().map_or(0, |l| l.len())
    }

    pub fn local_row(&self, global_row: usize) -> usize {
        debug_assert!(global_row >= self.row_offset);
        global_row - self.row_offset
    }

    /// Attention weight alpha[(l,h)][row, key] by global row index.
    pub fn weight(&self, tape: &Tape, l: usize, h: usize, global_row: usize, key: usize) -> f32 {
        let local = self.local_row(global_row);
        tape.data(self.alphas[l][h])[local * self.n_keys + key]
    }
}

pub struct ForwardOutput {
    /// (local rows, vocab) logits for every computed position.
    pub logits: TensorId,
    pub record: Option<AttentionRecord>,
    pub vision_map: VisionTokenMap,
    /// Global positions of the teacher-forced output tokens.
    pub output_rows: Vec<usize>,
    /// Global position of the OUT marker (its row predicts the first output).
    pub out_marker_row: usize,
    /// Global index of logits row 0 (0 for a monolithic forward).
    pub row_offset: usize,
    pub seq_len: usize,
}

impl ForwardOutput {
    pub fn logits_row<'t>(&self, tape: &'t Tape, global_row: usize) -> &'t [f32] {
        let vocab = tape.shape(self.logits)[1];
        let local = global_row - self.row_offset;
        &tape.data(self.logits)[local * vocab..(local + 1) * vocab]
    }
}

/// Cached per-layer key/value blocks for the conversation up to (not
/// including) the final image. Computed once without gradients.
pub struct PrefixCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    d: usize,
    n_prior_images: usize,
    fingerprint: u64,
}

impl PrefixCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn checksum(keys: &[Vec<f32>], values: &[Vec<f32>]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f32| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for m in keys.iter().chain(values.iter()) {
            for &v in m {
                eat(v);
            }
        }
        h
    }

    fn verify(&self) -> Result<()> {
        if Self::checksum(&self.keys, &self.values) != self.fingerprint {
            return Err(VlmError::PrefixMutated);
        }
        Ok(())
    }
}

/// Sequence layout bookkeeping (all positions global).
struct SeqPlan {
    prompt_tokens: Vec<u32>,
    n_images: usize,
    tokens_per_image: usize,
    out_marker: usize,
    total: usize,
}

impl SeqPlan {
    fn new(config: &ModelConfig, query: &SelectionQuery, n_images: usize, n_outputs: usize) -> Result<SeqPlan> {
        let prompt_tokens = vec![
            tok::BOS,
            tok::QRY,
            config.cat_token(query.category_index),
            config.fmt_token(query.format),
        ];
        let t = config.tokens_per_image();
        let out_marker = prompt_tokens.len() + n_images * (1 + t);
        let total = out_marker + 1 + n_outputs;
        if total > config.max_seq {
            return Err(VlmError::Overlength {
                len: total,
                max: config.max_seq,
            });
        }
        Ok(SeqPlan {
            prompt_tokens,
            n_images,
            tokens_per_image: t,
            out_marker,
            total,
        })
    }

    fn image_marker(&self, i: usize) -> usize {
        self.prompt_tokens.len() + i * (1 + self.tokens_per_image)
    }

    fn final_image_marker(&self) -> usize {
        self.image_marker(self.n_images - 1)
    }

    fn output_rows(&self, n_outputs: usize) -> Vec<usize> {
        (0..n_outputs).map(|k| self.out_marker + 1 + k).collect()
    }
}

/// Turns a canvas into one vision token per non-overlapping patch cell.
/// Any cell whose pixel block intersects the adversarial mask joins P.
pub fn patchify(
    tape: &mut Tape,
    config: &ModelConfig,
    patch_proj: TensorId,
    source: &ImageSource,
    seq_offset: usize,
) -> Result<(TensorId, VisionTokenMap)> {
    let expected = [config.canvas_h, config.canvas_w, 3];
    let (canvas_id, mask) = match source {
        ImageSource::Pixels(px) => {
            if px.len() != expected.iter().product::<usize>() {
                return Err(VlmError::ExtentMismatch {
                    what: "patchify image",
                    expected: expected.to_vec(),
                    got: vec![px.len()],
                });
            }
            (tape.constant(px.to_vec(), &expected)?, None)
        }
        ImageSource::Node { canvas, mask } => {
            if tape.shape(*canvas) != expected {
                return Err(VlmError::ExtentMismatch {
                    what: "patchify image",
                    expected: expected.to_vec(),
                    got: tape.shape(*canvas).to_vec(),
                });
            }
            (*canvas, *mask)
        }
    };
    if let Some(m) = mask {
        if m.len() != config.canvas_h * config.canvas_w {
            return Err(VlmError::ExtentMismatch {
                what: "patchify mask",
                expected: vec![config.canvas_h * config.canvas_w],
                got: vec![m.len()],
            });
        }
    }

    let cells = tape.cells(canvas_id, config.patch)?;
    let embeds = tape.matmul(cells, patch_proj)?;

    let rows = config.vision_rows();
    let cols = config.vision_cols();
    let grid: Vec<usize> = (0..rows * cols).map(|i| seq_offset + i).collect();
    let vision_set = grid.clone();
    let mut patch_set = Vec::new();
    if let Some(m) = mask {
        for cr in 0..rows {
            for cc in 0..cols {
                let covered = (0..config.patch).any(|py| {
                    (0..config.patch)
                        .any(|px| m[(cr * config.patch + py) * config.canvas_w + cc * config.patch + px])
                });
                if covered {
                    patch_set.push(seq_offset + cr * cols + cc);
                }
            }
        }
    }
    Ok((
        embeds,
        VisionTokenMap {
            rows,
            cols,
            grid,
            patch_set,
            vision_set,
        },
    ))
}

impl Model {
    /// Monolithic forward over the whole conversation. Only the final image
    /// may carry gradients or a mask.
    pub fn forward_full(
        &self,
        tape: &mut Tape,
        query: &SelectionQuery,
        images: &[ImageSource],
        output_tokens: &[u32],
        trainable_weights: bool,
        capture: bool,
    ) -> Result<ForwardOutput> {
        self.forward_full_nodes(tape, query, images, output_tokens, trainable_weights, capture)
            .map(|(out, _)| out)
    }

    /// As [`Model::forward_full`], also returning the weight nodes so the
    /// training loop can collect parameter gradients.
    pub(crate) fn forward_full_nodes(
        &self,
        tape: &mut Tape,
        query: &SelectionQuery,
        images: &[ImageSource],
        output_tokens: &[u32],
        trainable_weights: bool,
        capture: bool,
    ) -> Result<(ForwardOutput, WeightNodes)> {
        assert!(!images.is_empty(), "at least one image required");
        for img in &images[..images.len() - 1] {
            if matches!(img, ImageSource::Node { .. }) {
                return Err(VlmError::MaskOnNonFinalImage);
            }
        }
        let plan = SeqPlan::new(&self.config, query, images.len(), output_tokens.len())?;
        let nodes = self.weights.to_tape(tape, trainable_weights)?;

        let mut segments: Vec<TensorId> = Vec::new();
        let mut vision_map = None;
        let prompt_emb = tape.embed(nodes.tok, &u32s_to_usize(&plan.prompt_tokens))?;
        segments.push(prompt_emb);
        for (i, img) in images.iter().enumerate() {
            let marker = tape.embed(nodes.tok, &[tok::IMG as usize])?;
            segments.push(marker);
            let (emb, map) = patchify(tape, &self.config, nodes.patch, img, plan.image_marker(i) + 1)?;
            segments.push(emb);
            if i == images.len() - 1 {
                vision_map = Some(map);
            }
        }
        let out_marker = tape.embed(nodes.tok, &[tok::OUT as usize])?;
        segments.push(out_marker);
        if !output_tokens.is_empty() {
            let out_emb = tape.embed(nodes.tok, &u32s_to_usize(output_tokens))?;
            segments.push(out_emb);
        }
        let tok_part = tape.concat_rows(&segments)?;
        let positions: Vec<usize> = (0..plan.total).collect();
        let pos_part = tape.embed(nodes.pos, &positions)?;
        let embeds = tape.add(tok_part, pos_part)?;

        let vision_map = vision_map.expect("final image map");
        let out = self.run_stack(
            tape,
            &nodes,
            embeds,
            None,
            0,
            capture,
            vision_map,
            plan.output_rows(output_tokens.len()),
            plan.out_marker,
            plan.total,
        )?;
        Ok((out, nodes))
    }

    /// Computes the conversation prefix (prompt plus any prior images) once,
    /// without gradients, caching per-layer keys and values.
    pub fn build_prefix(&self, query: &SelectionQuery, prior_images: &[&[f32]]) -> Result<PrefixCache> {
        let n_images = prior_images.len() + 1;
        let plan = SeqPlan::new(&self.config, query, n_images, 0)?;
        let prefix_len = plan.final_image_marker();

        let mut tape = Tape::new();
        let nodes = self.weights.to_tape(&mut tape, false)?;
        let mut segments: Vec<TensorId> = Vec::new();
        let prompt_emb = tape.embed(nodes.tok, &u32s_to_usize(&plan.prompt_tokens))?;
        segments.push(prompt_emb);
        for (i, img) in prior_images.iter().enumerate() {
            let marker = tape.embed(nodes.tok, &[tok::IMG as usize])?;
            segments.push(marker);
            let (emb, _) = patchify(
                &mut tape,
                &self.config,
                nodes.patch,
                &ImageSource::Pixels(img),
                plan.image_marker(i) + 1,
            )?;
            segments.push(emb);
        }
        let tok_part = tape.concat_rows(&segments)?;
        let positions: Vec<usize> = (0..prefix_len).collect();
        let pos_part = tape.embed(nodes.pos, &positions)?;
        let mut h = tape.add(tok_part, pos_part)?;

        let mut keys = Vec::with_capacity(self.config.n_layers);
        let mut values = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, k, v, _) = self.layer(&mut tape, &nodes, l, h, None, 0, false)?;
            keys.push(tape.data(k).to_vec());
            values.push(tape.data(v).to_vec());
            h = next;
        }
        let fingerprint = PrefixCache::checksum(&keys, &values);
        Ok(PrefixCache {
            keys,
            values,
            len: prefix_len,
            d: self.config.d_model,
            n_prior_images: prior_images.len(),
            fingerprint,
        })
    }

    /// Runs only the suffix (final image + output tokens) over a cached
    /// prefix. Agrees with `forward_full` on logits and attention.
    pub fn forward_suffix(
        &self,
        tape: &mut Tape,
        prefix: &PrefixCache,
        query: &SelectionQuery,
        final_image: &ImageSource,
        output_tokens: &[u32],
        capture: bool,
    ) -> Result<ForwardOutput> {
        prefix.verify()?;
        let n_images = prefix.n_prior_images + 1;
        let plan = SeqPlan::new(&self.config, query, n_images, output_tokens.len())?;
        debug_assert_eq!(plan.final_image_marker(), prefix.len);
        let nodes = self.weights.to_tape(tape, false)?;

        let mut segments: Vec<TensorId> = Vec::new();
        let marker = tape.embed(nodes.tok, &[tok::IMG as usize])?;
        segments.push(marker);
        let (emb, vision_map) =
            patchify(tape, &self.config, nodes.patch, final_image, prefix.len + 1)?;
        segments.push(emb);
        let out_marker = tape.embed(nodes.tok, &[tok::OUT as usize])?;
        segments.push(out_marker);
        if !output_tokens.is_empty() {
            let out_emb = tape.embed(nodes.tok, &u32s_to_usize(output_tokens))?;
            segments.push(out_emb);
        }
        let tok_part = tape.concat_rows(&segments)?;
        let positions: Vec<usize> = (prefix.len..plan.total).collect();
        let pos_part = tape.embed(nodes.pos, &positions)?;
        let embeds = tape.add(tok_part, pos_part)?;

        self.run_stack(
            tape,
            &nodes,
            embeds,
            Some(prefix),
            prefix.len,
            capture,
            vision_map,
            plan.output_rows(output_tokens.len()),
            plan.out_marker,
            plan.total,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        tape: &mut Tape,
        nodes: &WeightNodes,
        embeds: TensorId,
        prefix: Option<&PrefixCache>,
        offset: usize,
        capture: bool,
        vision_map: VisionTokenMap,
        output_rows: Vec<usize>,
        out_marker_row: usize,
        seq_len: usize,
    ) -> Result<ForwardOutput> {
        let mut h = embeds;
        let mut alphas: Vec<Vec<TensorId>> = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, _, _, layer_alphas) = self.layer(tape, nodes, l, h, prefix, offset, capture)?;
            if capture {
                alphas.push(layer_alphas);
            }
            h = next;
        }
        let h_ln = tape.layer_norm(h, nodes.lnf_g, nodes.lnf_b, LN_EPS)?;
        let logits = tape.matmul(h_ln, nodes.w_out)?;
        let n_keys = offset + tape.shape(embeds)[0];
        let record = capture.then(|| AttentionRecord {
            alphas,
            row_offset: offset,
            n_keys,
            vision_map: vision_map.clone(),
            output_rows: output_rows.clone(),
        });
        Ok(ForwardOutput {
            logits,
            record,
            vision_map,
            output_rows,
            out_marker_row,
            row_offset: offset,
            seq_len,
        })
    }

    /// One pre-LN transformer layer. Returns (h_out, k, v, per-head alphas).
    fn layer(
        &self,
        tape: &mut Tape,
        nodes: &WeightNodes,
        l: usize,
        h: TensorId,
        prefix: Option<&PrefixCache>,
        offset: usize,
        capture: bool,
    ) -> Result<(TensorId, TensorId, TensorId, Vec<TensorId>)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let lw = &nodes.layers[l];

        let x = tape.layer_norm(h, lw.ln1_g, lw.ln1_b, LN_EPS)?;
        let qkv = tape.matmul(x, lw.w_qkv)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;

        let (k_full, v_full) = match prefix {
            Some(p) => {
                debug_assert_eq!(p.d, d);
                let pk = tape.constant(p.keys[l].clone(), &[p.len, d])?;
                let pv = tape.constant(p.values[l].clone(), &[p.len, d])?;
                (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
            }
            None => (k, v),
        };

        let scale = 1.0 / (dk as f32).sqrt();
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        let mut alphas = Vec::with_capacity(if capture { cfg.n_heads } else { 0 });
        for head in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, head * dk, dk)?;
            let kh = tape.slice_cols(k_full, head * dk, dk)?;
            let vh = tape.slice_cols(v_full, head * dk, dk)?;
            let scores_raw = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores_raw, scale);
            let alpha = tape.causal_softmax(scores, offset)?;
            if capture {
                alphas.push(alpha);
            }
            head_outs.push(tape.matmul(alpha, vh)?);
        }
        let attn = tape.concat_cols(&head_outs)?;
        let attn_proj = tape.matmul(attn, lw.w_o)?;
        let h1 = tape.add(h, attn_proj)?;

        let x2 = tape.layer_norm(h1, lw.ln2_g, lw.ln2_b, LN_EPS)?;
        let ff1 = tape.matmul(x2, lw.w_ff1)?;
        let act = tape.gelu(ff1);
        let ff2 = tape.matmul(act, lw.w_ff2)?;
        let h2 = tape.add(h1, ff2)?;
        Ok((h2, k, v, alphas))
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;

fn u32s_to_usize(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&t| t as usize).collect()
}
