//! Operation set: forward builders on [`Tape`] plus one backward rule per op.

use super::kernels;
use super::{AutodiffError, Result, Tape, Tensor, TensorId};

/// Recorded operation. Parents always have smaller node ids.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// (m,k) x (k,n)
    MatMul { a: TensorId, b: TensorId },
    /// (m,k) x (n,k)^T -> (m,n)
    MatMulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f32 },
    AddScalar { a: TensorId, c: f32 },
    Ln { a: TensorId },
    Exp { a: TensorId },
    Gelu { a: TensorId },
    /// Row softmax with causal mask; row i sees columns j <= offset + i.
    CausalSoftmax { a: TensorId, offset: usize },
    SoftmaxRows { a: TensorId },
    LogSoftmaxRows { a: TensorId },
    LayerNorm {
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
        // cached per-row statistics from the forward pass
        means: Vec<f32>,
        inv_stds: Vec<f32>,
    },
    /// Row lookup: out[i] = table[indices[i]].
    Embed { table: TensorId, indices: Vec<usize> },
    SliceRows { a: TensorId, start: usize, len: usize },
    SliceCols { a: TensorId, start: usize, len: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    /// Scalar sum of a column subset within one row of a 2-d tensor.
    RowSubsetSum { a: TensorId, row: usize, cols: Vec<usize> },
    /// out[i] = a[coords[i]] for a 2-d tensor.
    Gather2d { a: TensorId, coords: Vec<(usize, usize)> },
    /// (h,w,c) canvas -> (cells, cell*cell*c) rows, cells in row-major order.
    Cells { a: TensorId, cell: usize },
    /// Patch written over a constant background at (y0, x0).
    Paste { patch: TensorId, y0: usize, x0: usize },
}

impl Tape {
    fn req(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("expected 2-d tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape2("matmul", a)?;
        let (k2, n) = self.shape2("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.req(&[a, b]);
        Ok(self.push_op(out, vec![m, n], rg, Op::MatMul { a, b }))
    }

    /// a (m,k) times b (n,k) transposed: out (m,n).
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape2("matmul_nt", a)?;
        let (n, k2) = self.shape2("matmul_nt", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let bt = kernels::transpose(&self.nodes[b.0].data, n, k);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(&self.nodes[a.0].data, &bt, m, k, n, &mut out);
        let rg = self.req(&[a, b]);
        Ok(self.push_op(out, vec![m, n], rg, Op::MatMulNT { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.req(&[a, b]));
        Ok(self.push_op(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.req(&[a, b]));
        Ok(self.push_op(data, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.req(&[a, b]));
        Ok(self.push_op(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("div", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x / y);
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.req(&[a, b]));
        Ok(self.push_op(data, shape, rg, Op::Div { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].requires_grad);
        self.push_op(data, shape, rg, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f32) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].requires_grad);
        self.push_op(data, shape, rg, Op::AddScalar { a, c })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].requires_grad);
        self.push_op(data, shape, rg, Op::Ln { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].requires_grad);
        self.push_op(data, shape, rg, Op::Exp { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| kernels::gelu(x)).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].requires_grad);
        self.push_op(data, shape, rg, Op::Gelu { a })
    }

    pub fn causal_softmax(&mut self, a: TensorId, offset: usize) -> Result<TensorId> {
        let (rows, cols) = self.shape2("causal_softmax", a)?;
        let mut out = vec![0.0; rows * cols];
        kernels::causal_softmax(&self.nodes[a.0].data, rows, cols, offset, &mut out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, vec![rows, cols], rg, Op::CausalSoftmax { a, offset }))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.shape2("softmax_rows", a)?;
        let mut out = vec![0.0; rows * cols];
        // full-window causal softmax is plain row softmax
        kernels::causal_softmax(&self.nodes[a.0].data, rows, cols, cols, &mut out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, vec![rows, cols], rg, Op::SoftmaxRows { a }))
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.shape2("log_softmax_rows", a)?;
        let mut out = vec![0.0; rows * cols];
        kernels::log_softmax_rows(&self.nodes[a.0].data, rows, cols, &mut out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, vec![rows, cols], rg, Op::LogSoftmaxRows { a }))
    }

    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId> {
        let (rows, d) = self.shape2("layer_norm", a)?;
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let (out, means, inv_stds) = kernels::layer_norm(
            &self.nodes[a.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            rows,
            d,
            eps,
        );
        let rg = self.req(&[a, gamma, beta]);
        Ok(self.push_op(
            out,
            vec![rows, d],
            rg,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps,
                means,
                inv_stds,
            },
        ))
    }

    pub fn embed(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (v, d) = self.shape2("embed", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::InvalidArgument {
                op: "embed",
                msg: format!("index {bad} out of range for table with {v} rows"),
            });
        }
        let mut out = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push_op(
            out,
            vec![indices.len(), d],
            rg,
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.shape2("slice_rows", a)?;
        if start + len > rows {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range 0..{rows}", start + len),
            });
        }
        let data = self.nodes[a.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(data, vec![len, cols], rg, Op::SliceRows { a, start, len }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.shape2("slice_cols", a)?;
        if start + len > cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of range 0..{cols}", start + len),
            });
        }
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[a.0].data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(data, vec![rows, len], rg, Op::SliceCols { a, start, len }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_rows",
                msg: "empty part list".into(),
            });
        }
        let (_, cols) = self.shape2("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape2("concat_rows", p)?;
            if c != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            data.extend_from_slice(&self.nodes[p.0].data);
            rows += r;
        }
        let rg = self.req(parts);
        Ok(self.push_op(data, vec![rows, cols], rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_cols",
                msg: "empty part list".into(),
            });
        }
        let (rows, _) = self.shape2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape2("concat_cols", p)?;
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows, total],
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let c = widths[pi];
                data[r * total + off..r * total + off + c]
                    .copy_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
                off += c;
            }
        }
        let rg = self.req(parts);
        Ok(self.push_op(data, vec![rows, total], rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut s = 0.0f32;
        for &v in &self.nodes[a.0].data {
            s += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_op(vec![s], vec![], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len().max(1);
        let mut s = 0.0f32;
        for &v in &self.nodes[a.0].data {
            s += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_op(vec![s / n as f32], vec![], rg, Op::MeanAll { a })
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (rows, cols) = self.shape2("sum_axis", a)?;
        if axis > 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for 2-d tensor"),
            });
        }
        let data = axis_sum(&self.nodes[a.0].data, rows, cols, axis);
        let shape = if axis == 0 { vec![cols] } else { vec![rows] };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(data, shape, rg, Op::SumAxis { a, axis }))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (rows, cols) = self.shape2("mean_axis", a)?;
        if axis > 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean_axis",
                msg: format!("axis {axis} out of range for 2-d tensor"),
            });
        }
        let denom = if axis == 0 { rows } else { cols } as f32;
        let mut data = axis_sum(&self.nodes[a.0].data, rows, cols, axis);
        for v in &mut data {
            *v /= denom;
        }
        let shape = if axis == 0 { vec![cols] } else { vec![rows] };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(data, shape, rg, Op::MeanAxis { a, axis }))
    }

    pub fn row_subset_sum(&mut self, a: TensorId, row: usize, cols: &[usize]) -> Result<TensorId> {
        let (rows, width) = self.shape2("row_subset_sum", a)?;
        if row >= rows {
            return Err(AutodiffError::InvalidArgument {
                op: "row_subset_sum",
                msg: format!("row {row} out of range 0..{rows}"),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(AutodiffError::InvalidArgument {
                op: "row_subset_sum",
                msg: format!("column {bad} out of range 0..{width}"),
            });
        }
        let base = row * width;
        let mut s = 0.0f32;
        for &c in cols {
            s += self.nodes[a.0].data[base + c];
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(
            vec![s],
            vec![],
            rg,
            Op::RowSubsetSum {
                a,
                row,
                cols: cols.to_vec(),
            },
        ))
    }

    pub fn gather2d(&mut self, a: TensorId, coords: &[(usize, usize)]) -> Result<TensorId> {
        let (rows, cols) = self.shape2("gather2d", a)?;
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= rows || c >= cols {
                return Err(AutodiffError::InvalidArgument {
                    op: "gather2d",
                    msg: format!("coordinate ({r},{c}) out of range ({rows},{cols})"),
                });
            }
            out.push(self.nodes[a.0].data[r * cols + c]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(
            out,
            vec![coords.len()],
            rg,
            Op::Gather2d {
                a,
                coords: coords.to_vec(),
            },
        ))
    }

    /// Rearranges an (h,w,c) canvas into one row per non-overlapping
    /// cell-by-cell square, cells in row-major order.
    pub fn cells(&mut self, a: TensorId, cell: usize) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(AutodiffError::InvalidArgument {
                op: "cells",
                msg: format!("expected (h,w,c) canvas, got {s:?}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h % cell != 0 || w % cell != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "cells",
                msg: format!("canvas {h}x{w} not divisible by cell {cell}"),
            });
        }
        let (ch, cw) = (h / cell, w / cell);
        let row_len = cell * cell * c;
        let mut out = vec![0.0; ch * cw * row_len];
        let src = &self.nodes[a.0].data;
        for cr in 0..ch {
            for cc in 0..cw {
                let dst = &mut out[(cr * cw + cc) * row_len..(cr * cw + cc + 1) * row_len];
                for py in 0..cell {
                    let src_off = ((cr * cell + py) * w + cc * cell) * c;
                    let dst_off = py * cell * c;
                    dst[dst_off..dst_off + cell * c]
                        .copy_from_slice(&src[src_off..src_off + cell * c]);
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, vec![ch * cw, row_len], rg, Op::Cells { a, cell }))
    }

    /// Writes `patch` over a constant `background` at (y0, x0). Only the
    /// patch is differentiable; every other canvas pixel is a constant.
    pub fn paste(
        &mut self,
        background: &[f32],
        bg_shape: &[usize],
        patch: TensorId,
        y0: usize,
        x0: usize,
    ) -> Result<TensorId> {
        let ps = self.nodes[patch.0].shape.clone();
        if bg_shape.len() != 3 || ps.len() != 3 || bg_shape[2] != ps[2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "paste",
                lhs: bg_shape.to_vec(),
                rhs: ps,
            });
        }
        let (h, w, c) = (bg_shape[0], bg_shape[1], bg_shape[2]);
        let (ph, pw) = (ps[0], ps[1]);
        if y0 + ph > h || x0 + pw > w {
            return Err(AutodiffError::InvalidArgument {
                op: "paste",
                msg: format!("{ph}x{pw} patch at ({y0},{x0}) exceeds {h}x{w} canvas"),
            });
        }
        let mut out = background.to_vec();
        let src = &self.nodes[patch.0].data;
        for py in 0..ph {
            let dst_off = ((y0 + py) * w + x0) * c;
            out[dst_off..dst_off + pw * c].copy_from_slice(&src[py * pw * c..(py + 1) * pw * c]);
        }
        let rg = self.nodes[patch.0].requires_grad;
        Ok(self.push_op(out, vec![h, w, c], rg, Op::Paste { patch, y0, x0 }))
    }

    fn push_op(&mut self, data: Vec<f32>, shape: Vec<usize>, rg: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad: rg,
            grad: None,
            op,
        });
        id
    }

    /// Runs the backward rule of node `i`, accumulating into its parents.
    /// Called exactly once per node by [`Tape::backward`].
    pub(crate) fn backward_node(&mut self, i: usize) {
        let (parents, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = node.grad.as_ref().expect("grad present").clone();
        let op = node.op.clone();
        let out_data = &node.data;
        let out_shape = &node.shape;

        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = shape2(parents, a);
                let n = parents[b.0].shape[1];
                if parents[a.0].requires_grad {
                    let bt = kernels::transpose(&parents[b.0].data, k, n);
                    let ga = grad_buf(parents, a);
                    kernels::matmul_nn_acc(&g, &bt, m, n, k, ga);
                }
                if parents[b.0].requires_grad {
                    let a_data = std::mem::take(&mut parents[a.0].data);
                    let gb = grad_buf(parents, b);
                    kernels::matmul_tn_acc(&a_data, &g, m, k, n, gb);
                    parents[a.0].data = a_data;
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = shape2(parents, a);
                let n = parents[b.0].shape[0];
                if parents[a.0].requires_grad {
                    let b_data = std::mem::take(&mut parents[b.0].data);
                    let ga = grad_buf(parents, a);
                    kernels::matmul_nn_acc(&g, &b_data, m, n, k, ga);
                    parents[b.0].data = b_data;
                }
                if parents[b.0].requires_grad {
                    let a_data = std::mem::take(&mut parents[a.0].data);
                    let gb = grad_buf(parents, b);
                    kernels::matmul_tn_acc(&g, &a_data, m, n, k, gb);
                    parents[a.0].data = a_data;
                }
            }
            Op::Add { a, b } => {
                accum(parents, a, &g, |gi, _| gi);
                accum(parents, b, &g, |gi, _| gi);
            }
            Op::Sub { a, b } => {
                accum(parents, a, &g, |gi, _| gi);
                accum(parents, b, &g, |gi, _| -gi);
            }
            Op::Mul { a, b } => {
                if parents[a.0].requires_grad {
                    let b_data = std::mem::take(&mut parents[b.0].data);
                    accum(parents, a, &g, |gi, idx| gi * b_data[idx]);
                    parents[b.0].data = b_data;
                }
                if parents[b.0].requires_grad {
                    let a_data = std::mem::take(&mut parents[a.0].data);
                    accum(parents, b, &g, |gi, idx| gi * a_data[idx]);
                    parents[a.0].data = a_data;
                }
            }
            Op::Div { a, b } => {
                // c = a/b: dc/da = 1/b, dc/db = -a/b^2 = -c/b
                if parents[a.0].requires_grad {
                    let b_data = std::mem::take(&mut parents[b.0].data);
                    accum(parents, a, &g, |gi, idx| gi / b_data[idx]);
                    parents[b.0].data = b_data;
                }
                if parents[b.0].requires_grad {
                    let c = out_data.clone();
                    let b_data = std::mem::take(&mut parents[b.0].data);
                    accum(parents, b, &g, |gi, idx| -gi * c[idx] / b_data[idx]);
                    parents[b.0].data = b_data;
                }
            }
            Op::Scale { a, c } => accum(parents, a, &g, |gi, _| gi * c),
            Op::AddScalar { a, .. } => accum(parents, a, &g, |gi, _| gi),
            Op::Ln { a } => {
                if parents[a.0].requires_grad {
                    let x = std::mem::take(&mut parents[a.0].data);
                    accum(parents, a, &g, |gi, idx| gi / x[idx]);
                    parents[a.0].data = x;
                }
            }
            Op::Exp { a } => {
                let y = out_data.clone();
                accum(parents, a, &g, |gi, idx| gi * y[idx]);
            }
            Op::Gelu { a } => {
                if parents[a.0].requires_grad {
                    let x = std::mem::take(&mut parents[a.0].data);
                    accum(parents, a, &g, |gi, idx| gi * kernels::gelu_grad(x[idx]));
                    parents[a.0].data = x;
                }
            }
            Op::CausalSoftmax { a, offset } => {
                if parents[a.0].requires_grad {
                    let rows = out_shape[0];
                    let cols = out_shape[1];
                    let y = out_data.clone();
                    let ga = grad_buf(parents, a);
                    kernels::causal_softmax_backward(&y, &g, rows, cols, offset, ga);
                }
            }
            Op::SoftmaxRows { a } => {
                if parents[a.0].requires_grad {
                    let rows = out_shape[0];
                    let cols = out_shape[1];
                    let y = out_data.clone();
                    let ga = grad_buf(parents, a);
                    kernels::causal_softmax_backward(&y, &g, rows, cols, cols, ga);
                }
            }
            Op::LogSoftmaxRows { a } => {
                if parents[a.0].requires_grad {
                    let rows = out_shape[0];
                    let cols = out_shape[1];
                    let y = out_data.clone();
                    let ga = grad_buf(parents, a);
                    for r in 0..rows {
                        let mut gsum = 0.0f32;
                        for j in 0..cols {
                            gsum += g[r * cols + j];
                        }
                        for j in 0..cols {
                            ga[r * cols + j] += g[r * cols + j] - y[r * cols + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps: _,
                means,
                inv_stds,
            } => {
                let rows = out_shape[0];
                let d = out_shape[1];
                let x = parents[a.0].data.clone();
                let gm = parents[gamma.0].data.clone();
                if parents[a.0].requires_grad {
                    let ga = grad_buf(parents, a);
                    for r in 0..rows {
                        let inv = inv_stds[r];
                        let mean = means[r];
                        // dxhat, then the two per-row reductions
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            let xhat = (x[r * d + j] - mean) * inv;
                            let dxhat = g[r * d + j] * gm[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dn = d as f32;
                        for j in 0..d {
                            let xhat = (x[r * d + j] - mean) * inv;
                            let dxhat = g[r * d + j] * gm[j];
                            ga[r * d + j] +=
                                inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                        }
                    }
                }
                if parents[gamma.0].requires_grad {
                    let gg = grad_buf(parents, gamma);
                    for r in 0..rows {
                        let inv = inv_stds[r];
                        let mean = means[r];
                        for j in 0..d {
                            let xhat = (x[r * d + j] - mean) * inv;
                            gg[j] += g[r * d + j] * xhat;
                        }
                    }
                }
                if parents[beta.0].requires_grad {
                    let gb = grad_buf(parents, beta);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Embed { table, indices } => {
                if parents[table.0].requires_grad {
                    let d = parents[table.0].shape[1];
                    let gt = grad_buf(parents, table);
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[idx * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start, len } => {
                if parents[a.0].requires_grad {
                    let cols = parents[a.0].shape[1];
                    let ga = grad_buf(parents, a);
                    for r in 0..len {
                        for j in 0..cols {
                            ga[(start + r) * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                if parents[a.0].requires_grad {
                    let cols = parents[a.0].shape[1];
                    let rows = parents[a.0].shape[0];
                    let ga = grad_buf(parents, a);
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in &parts {
                    let numel = parents[p.0].numel();
                    if parents[p.0].requires_grad {
                        let gp = grad_buf(parents, p);
                        for j in 0..numel {
                            gp[j] += g[off + j];
                        }
                    }
                    off += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out_shape[0];
                let total = out_shape[1];
                let mut off = 0;
                for &p in &parts {
                    let c = parents[p.0].shape[1];
                    if parents[p.0].requires_grad {
                        let gp = grad_buf(parents, p);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SumAll { a } => accum(parents, a, &vec![g[0]; parents[a.0].numel()], |gi, _| gi),
            Op::MeanAll { a } => {
                let n = parents[a.0].numel().max(1) as f32;
                accum(parents, a, &vec![g[0] / n; parents[a.0].numel()], |gi, _| gi)
            }
            Op::SumAxis { a, axis } => {
                if parents[a.0].requires_grad {
                    let rows = parents[a.0].shape[0];
                    let cols = parents[a.0].shape[1];
                    let ga = grad_buf(parents, a);
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * cols + j] += if axis == 0 { g[j] } else { g[r] };
                        }
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                if parents[a.0].requires_grad {
                    let rows = parents[a.0].shape[0];
                    let cols = parents[a.0].shape[1];
                    let denom = if axis == 0 { rows } else { cols } as f32;
                    let ga = grad_buf(parents, a);
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * cols + j] +=
                                (if axis == 0 { g[j] } else { g[r] }) / denom;
                        }
                    }
                }
            }
            Op::RowSubsetSum { a, row, cols } => {
                if parents[a.0].requires_grad {
                    let width = parents[a.0].shape[1];
                    let ga = grad_buf(parents, a);
                    for &c in &cols {
                        ga[row * width + c] += g[0];
                    }
                }
            }
            Op::Gather2d { a, coords } => {
                if parents[a.0].requires_grad {
                    let cols = parents[a.0].shape[1];
                    let ga = grad_buf(parents, a);
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        ga[r * cols + c] += g[k];
                    }
                }
            }
            Op::Cells { a, cell } => {
                if parents[a.0].requires_grad {
                    let s = parents[a.0].shape.clone();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let (ch, cw) = (h / cell, w / cell);
                    let row_len = cell * cell * c;
                    let ga = grad_buf(parents, a);
                    for cr in 0..ch {
                        for cc in 0..cw {
                            let row = &g[(cr * cw + cc) * row_len..(cr * cw + cc + 1) * row_len];
                            for py in 0..cell {
                                let dst_off = ((cr * cell + py) * w + cc * cell) * c;
                                let src_off = py * cell * c;
                                for j in 0..cell * c {
                                    ga[dst_off + j] += row[src_off + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Paste { patch, y0, x0 } => {
                if parents[patch.0].requires_grad {
                    let ps = parents[patch.0].shape.clone();
                    let (ph, pw, c) = (ps[0], ps[1], ps[2]);
                    let w = out_shape[1];
                    let gp = grad_buf(parents, patch);
                    for py in 0..ph {
                        let src_off = ((y0 + py) * w + x0) * c;
                        for j in 0..pw * c {
                            gp[py * pw * c + j] += g[src_off + j];
                        }
                    }
                }
            }
        }
    }
}

fn shape2(nodes: &[Tensor], id: TensorId) -> (usize, usize) {
    (nodes[id.0].shape[0], nodes[id.0].shape[1])
}

/// Zero-initialized gradient buffer of a parent node.
fn grad_buf(nodes: &mut [Tensor], id: TensorId) -> &mut [f32] {
    let numel = nodes[id.0].numel();
    nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel])
}

/// parent.grad[i] += f(g[i], i) for every element, if the parent needs it.
fn accum(nodes: &mut [Tensor], id: TensorId, g: &[f32], f: impl Fn(f32, usize) -> f32) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let buf = grad_buf(nodes, id);
    for (i, gi) in g.iter().enumerate() {
        buf[i] += f(*gi, i);
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axis_sum(data: &[f32], rows: usize, cols: usize, axis: usize) -> Vec<f32> {
    if axis == 0 {
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += data[r * cols + j];
            }
        }
        out
    } else {
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0f32;
            for j in 0..cols {
                s += data[r * cols + j];
            }
            out[r] = s;
        }
        out
    }
}
