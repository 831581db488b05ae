//! Dense f32 tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation during a forward pass; calling
//! [`Tape::backward`] on a scalar loss walks the recorded nodes once in
//! reverse order and deposits gradients on every `requires_grad` leaf.
//! Tensors are append-only: ops reference earlier node ids, so reverse
//! creation order is a valid reverse topological order.
//!
//! There is no broadcasting beyond scalar-with-tensor; shapes must conform
//! exactly, which keeps every backward rule auditable.

mod adam;
pub mod kernels;
mod ops;

pub use adam::AdamState;
pub use ops::Op;

use thiserror::Error;

use crate::rng::RngState;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("non-finite value encountered in {what}")]
    NonFinite { what: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// A recorded tensor: row-major f32 data plus an optional gradient of the
/// same shape, filled in by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
    pub(crate) op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Records a forward computation and replays it backward exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Tensor>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    /// A differentiable leaf; receives a gradient on backward.
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<TensorId> {
        Self::check_numel("leaf", &data, shape)?;
        Ok(self.push(data, shape.to_vec(), true, Op::Leaf))
    }

    /// A constant: participates in forward values only.
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<TensorId> {
        Self::check_numel("constant", &data, shape)?;
        Ok(self.push(data, shape.to_vec(), false, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f32) -> TensorId {
        self.push(vec![v], vec![], false, Op::Leaf)
    }

    fn check_numel(op: &'static str, data: &[f32], shape: &[usize]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("data length {} does not match shape {:?}", data.len(), shape),
            });
        }
        Ok(())
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    /// Propagates gradients from a scalar loss to every `requires_grad`
    /// ancestor. Each recorded node's rule runs at most once; a second
    /// backward on the same tape is an error rather than silent
    /// accumulation.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Compares the tape gradient of a scalar-valued builder against central
/// finite differences at `samples` random coordinates of `x`.
///
/// Returns the max over sampled coordinates of
/// `|analytic - fd| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check<F>(
    build: F,
    x: &[f32],
    shape: &[usize],
    h: f32,
    samples: usize,
    rng: &mut RngState,
) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x.to_vec(), shape)?;
    let loss = build(&mut tape, id)?;
    let base = tape.value(loss);
    if !base.is_finite() {
        return Err(AutodiffError::NonFinite {
            what: "finite_difference_check: f(x)".into(),
        });
    }
    tape.backward(loss)?;
    let analytic = tape.grad(id).expect("leaf gradient").to_vec();

    let eval = |probe: &[f32]| -> Result<f64> {
        let mut t = Tape::new();
        let pid = t.leaf(probe.to_vec(), shape)?;
        let l = build(&mut t, pid)?;
        let v = t.value(l);
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite {
                what: "finite_difference_check: probe".into(),
            });
        }
        Ok(v as f64)
    };

    let mut worst = 0.0f64;
    for _ in 0..samples {
        let i = rng.below(x.len());
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h as f64);
        let a = analytic[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// `h` used by the finite-difference oracles: an exactly representable
/// power of two close to 1e-3, so dyadic probe points stay exact in f32.
pub const FD_H: f32 = 0.000_976_562_5; // 2^-10
