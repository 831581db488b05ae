//! Model parameters: storage, initialization, and tape loading.

use super::{ModelConfig, Result};
use crate::autodiff::{Tape, TensorId};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Mat {
    fn randn(rng: &mut RngState, shape: &[usize], std: f32) -> Mat {
        let n: usize = shape.iter().product();
        Mat {
            data: (0..n).map(|_| rng.normal() * std).collect(),
            shape: shape.to_vec(),
        }
    }

    fn fill(shape: &[usize], v: f32) -> Mat {
        Mat {
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w_qkv: Mat,
    pub w_o: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w_ff1: Mat,
    pub w_ff2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tok_embed: Mat,
    pub pos_embed: Mat,
    pub patch_proj: Mat,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    pub w_out: Mat,
}

impl ModelWeights {
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> ModelWeights {
        let d = config.d_model;
        let vocab = config.vocab_size();
        let cell_dim = config.patch * config.patch * 3;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Mat::fill(&[d], 1.0),
                ln1_b: Mat::fill(&[d], 0.0),
                w_qkv: Mat::randn(rng, &[d, 3 * d], 0.02),
                w_o: Mat::randn(rng, &[d, d], 0.02 * resid_scale),
                ln2_g: Mat::fill(&[d], 1.0),
                ln2_b: Mat::fill(&[d], 0.0),
                w_ff1: Mat::randn(rng, &[d, config.ffn_hidden], 0.02),
                w_ff2: Mat::randn(rng, &[config.ffn_hidden, d], 0.02 * resid_scale),
            })
            .collect();
        ModelWeights {
            tok_embed: Mat::randn(rng, &[vocab, d], 0.1),
            pos_embed: Mat::randn(rng, &[config.max_seq, d], 0.05),
            patch_proj: Mat::randn(rng, &[cell_dim, d], 0.02),
            layers,
            lnf_g: Mat::fill(&[d], 1.0),
            lnf_b: Mat::fill(&[d], 0.0),
            w_out: Mat::randn(rng, &[d, vocab], 0.05),
        }
    }

    /// Named parameters in fixed order; the order defines the checkpoint
    /// layout and the gradient collection order.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
            ("patch_proj".to_string(), &self.patch_proj),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &l.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &l.ln1_b));
            out.push((format!("layer{i}.w_qkv"), &l.w_qkv));
            out.push((format!("layer{i}.w_o"), &l.w_o));
            out.push((format!("layer{i}.ln2_g"), &l.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &l.ln2_b));
            out.push((format!("layer{i}.w_ff1"), &l.w_ff1));
            out.push((format!("layer{i}.w_ff2"), &l.w_ff2));
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![
            &mut self.tok_embed,
            &mut self.pos_embed,
            &mut self.patch_proj,
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(&mut l.w_qkv);
            out.push(&mut l.w_o);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.w_ff1);
            out.push(&mut l.w_ff2);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_out);
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named_params().iter().map(|(_, m)| m.data.len()).collect()
    }

    /// Squared L2 distance between two weight sets.
    pub fn l2_distance(&self, other: &ModelWeights) -> f64 {
        let a = self.named_params();
        let b = other.named_params();
        let mut acc = 0.0f64;
        for ((_, ma), (_, mb)) in a.iter().zip(b.iter()) {
            for (x, y) in ma.data.iter().zip(mb.data.iter()) {
                let d = (*x - *y) as f64;
                acc += d * d;
            }
        }
        acc
    }

    pub(crate) fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<WeightNodes> {
        let mut load = |m: &Mat| -> Result<TensorId> {
            Ok(if trainable {
                tape.leaf(m.data.clone(), &m.shape)?
            } else {
                tape.constant(m.data.clone(), &m.shape)?
            })
        };
        let tok = load(&self.tok_embed)?;
        let pos = load(&self.pos_embed)?;
        let patch = load(&self.patch_proj)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(LayerNodes {
                ln1_g: load(&l.ln1_g)?,
                ln1_b: load(&l.ln1_b)?,
                w_qkv: load(&l.w_qkv)?,
                w_o: load(&l.w_o)?,
                ln2_g: load(&l.ln2_g)?,
                ln2_b: load(&l.ln2_b)?,
                w_ff1: load(&l.w_ff1)?,
                w_ff2: load(&l.w_ff2)?,
            });
        }
        Ok(WeightNodes {
            tok,
            pos,
            patch,
            layers,
            lnf_g: load(&self.lnf_g)?,
            lnf_b: load(&self.lnf_b)?,
            w_out: load(&self.w_out)?,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNodes {
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub w_qkv: TensorId,
    pub w_o: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
    pub w_ff1: TensorId,
    pub w_ff2: TensorId,
}

#[derive(Debug, Clone)]
pub(crate) struct WeightNodes {
    pub tok: TensorId,
    pub pos: TensorId,
    pub patch: TensorId,
    pub layers: Vec<LayerNodes>,
    pub lnf_g: TensorId,
    pub lnf_b: TensorId,
    pub w_out: TensorId,
}

impl WeightNodes {
    /// Gradients in `named_params` order after a backward pass.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Vec<f32>> {
        self.ordered_ids()
            .into_iter()
            .map(|id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.tensor(id).numel()])
            })
            .collect()
    }

    fn ordered_ids(&self) -> Vec<TensorId> {
        let mut ids = vec![self.tok, self.pos, self.patch];
        for l in &self.layers {
            ids.extend([
                l.ln1_g, l.ln1_b, l.w_qkv, l.w_o, l.ln2_g, l.ln2_b, l.w_ff1, l.w_ff2,
            ]);
        }
        ids.extend([self.lnf_g, self.lnf_b, self.w_out]);
        ids
    }
}
