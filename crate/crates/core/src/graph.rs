//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse,
//! visiting each node once. Gradients are accumulated additively, which makes
//! fan-out (a value consumed by several operations) work without special
//! handling.
//!
//! Shapes are always explicit: there is no broadcasting.

use crate::error::{Error, Result};
use crate::linalg::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    LinearRows {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Softmax(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Concat(Var, Var),
    Reshape(Var),
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Log(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    RowNormalize {
        input: Var,
        norms: Vec<f64>,
    },
    MatMulNt(Var, Var),
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.values.push(value);
        self.grads.push(None);
        self.needs_grad.push(needs_grad);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Cross-correlation of a C×H×W input with Co×C×kh×kw kernels plus bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernels).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] {
            return Err(dim_err("conv2d", &is, &ks));
        }
        if bs != [ks[0]] {
            return Err(dim_err("conv2d", &ks, &bs));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be at least 1"));
        }
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > is[1] + 2 * padding || kw > is[2] + 2 * padding {
            return Err(dim_err("conv2d", &is, &ks));
        }
        let geometry = ConvGeometry {
            channels: is[0],
            height: is[1],
            width: is[2],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (is[1] + 2 * padding - kh) / stride + 1,
            out_w: (is[2] + 2 * padding - kw) / stride + 1,
        };
        let cols = linalg::im2col(self.values[input.0].data(), &geometry);
        let out_len = geometry.out_len();
        let mut out = vec![0.0; c_out * out_len];
        for (c, row) in out.chunks_mut(out_len).enumerate() {
            row.fill(self.values[bias.0].data()[c]);
        }
        linalg::gemm(
            c_out,
            geometry.patch_len(),
            out_len,
            self.values[kernels.0].data(),
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![c_out, geometry.out_h, geometry.out_w], out)?;
        let needs = self.any_grad(&[input, kernels, bias]);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geometry,
                cols: if needs { cols } else { Vec::new() },
            },
            needs,
        )
    }

    /// Max over `window`×`window` cells. Ties resolve to the first cell in
    /// row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        if is.len() != 3 || window == 0 || window > is[1] || window > is[2] {
            return Err(dim_err("maxpool2d", &is, &[window, window]));
        }
        if stride == 0 {
            return Err(Error::contract("maxpool2d: stride must be at least 1"));
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.values[input.0].data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.any_grad(&[input]);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push("maxpool2d", value, Op::MaxPool2d { input, argmax }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = &self.values[input.0];
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        self.push("relu", value, Op::Relu(input), needs)
    }

    /// `weights · input + bias` for a vector input.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 1 || ws.len() != 2 || ws[1] != is[0] {
            return Err(dim_err("dense", &ws, &is));
        }
        if bs != [ws[0]] {
            return Err(dim_err("dense", &ws, &bs));
        }
        let (m, n) = (ws[0], ws[1]);
        let x = self.values[input.0].data();
        let w = self.values[weights.0].data();
        let b = self.values[bias.0].data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &w[i * n..(i + 1) * n];
                b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let needs = self.any_grad(&[input, weights, bias]);
        self.push(
            "dense",
            Tensor::vector(out),
            Op::Dense {
                input,
                weights,
                bias,
            },
            needs,
        )
    }

    /// Softmax of a rank-1 tensor with at least two entries.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 || s[0] < 2 {
            return Err(Error::contract(format!(
                "softmax needs a vector of length >= 2, got shape {s:?}"
            )));
        }
        let value = Tensor::vector(softmax_slice(self.values[logits.0].data()));
        let needs = self.any_grad(&[logits]);
        self.push("softmax", value, Op::Softmax(logits), needs)
    }

    /// Batched dense layer: row `i` of the b×m output is
    /// `weights · input[i] + bias` for a b×n input and m×n weights.
    pub fn linear_rows(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 2 || ws.len() != 2 || ws[1] != is[1] {
            return Err(dim_err("linear_rows", &ws, &is));
        }
        if bs != [ws[0]] {
            return Err(dim_err("linear_rows", &ws, &bs));
        }
        let (rows, m, n) = (is[0], ws[0], ws[1]);
        let b = self.values[bias.0].data();
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        linalg::gemm(
            rows,
            n,
            m,
            self.values[input.0].data(),
            false,
            self.values[weights.0].data(),
            true,
            1.0,
            &mut out,
        );
        let needs = self.any_grad(&[input, weights, bias]);
        self.push(
            "linear_rows",
            Tensor::new(vec![rows, m], out)?,
            Op::LinearRows {
                input,
                weights,
                bias,
            },
            needs,
        )
    }

    /// Row-wise softmax of a matrix with at least two columns.
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::contract(format!(
                "softmax_rows needs a matrix with >= 2 columns, got shape {s:?}"
            )));
        }
        let data = self.values[logits.0]
            .data()
            .chunks(s[1])
            .flat_map(softmax_slice)
            .collect();
        let needs = self.any_grad(&[logits]);
        self.push("softmax_rows", Tensor::new(s, data)?, Op::SoftmaxRows(logits), needs)
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax_rows(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::contract(format!(
                "log_softmax_rows needs a non-empty matrix, got shape {s:?}"
            )));
        }
        let k = s[1];
        let mut out = self.values[input.0].data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.any_grad(&[input]);
        self.push("log_softmax_rows", Tensor::new(s, out)?, Op::LogSoftmaxRows(input), needs)
    }

    /// `a ⧺ b` for two vectors, or row-wise for two matrices with the same
    /// number of rows; `a` always occupies the leading entries.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (rows, wa, wb) = match (sa.as_slice(), sb.as_slice()) {
            ([n], [m]) => (1, *n, *m),
            ([r, n], [r2, m]) if r == r2 => (*r, *n, *m),
            _ => {
                return Err(Error::contract(format!(
                    "concat needs two vectors or two matrices with equal row counts, got shapes {sa:?} and {sb:?}"
                )))
            }
        };
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let shape = if sa.len() == 1 { vec![wa + wb] } else { vec![rows, wa + wb] };
        let needs = self.any_grad(&[a, b]);
        self.push("concat", Tensor::new(shape, data)?, Op::Concat(a, b), needs)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[input.0]
            .reshaped(shape)
            .map_err(|_| dim_err("reshape", self.shape(input), shape))?;
        let needs = self.any_grad(&[input]);
        self.push("reshape", value, Op::Reshape(input), needs)
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.values[input.0].len();
        self.reshape(input, &[n])
    }

    /// Stacks equally shaped vectors into a matrix, one row per input.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let s = self.shape(*first).to_vec();
        if s.len() != 1 {
            return Err(Error::contract(format!("stack needs vectors, got shape {s:?}")));
        }
        let mut data = Vec::with_capacity(rows.len() * s[0]);
        for r in rows {
            if self.shape(*r) != s.as_slice() {
                return Err(dim_err("stack", &s, self.shape(*r)));
            }
            data.extend_from_slice(self.values[r.0].data());
        }
        let value = Tensor::new(vec![rows.len(), s[0]], data)?;
        let needs = self.any_grad(rows);
        self.push("stack", value, Op::Stack(rows.to_vec()), needs)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let v = self.values[input.0].data().iter().sum();
        let needs = self.any_grad(&[input]);
        self.push("sum", Tensor::scalar(v), Op::Sum(input), needs)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = &self.values[input.0];
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.any_grad(&[input]);
        self.push("mean", Tensor::scalar(v), Op::Mean(input), needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.any_grad(&[a, b]);
        self.push("add", value, Op::Add(a, b), needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.any_grad(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let t = &self.values[input.0];
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        self.push("scale", value, Op::Scale(input, factor), needs)
    }

    /// Adds a constant tensor of the same shape (no gradient flows into it).
    pub fn add_const(&mut self, input: Var, offset: &Tensor) -> Result<Var> {
        let t = &self.values[input.0];
        if t.shape() != offset.shape() {
            return Err(dim_err("add_const", t.shape(), offset.shape()));
        }
        let data = t.data().iter().zip(offset.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        self.push("add_const", value, Op::AddConst(input), needs)
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let t = &self.values[input.0];
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        self.push("log", value, Op::Log(input), needs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = &self.values[input.0];
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        self.push("clamp", value, Op::Clamp { input, lo, hi }, needs)
    }

    /// Picks `input[i, indices[i]]` from each row of a matrix.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(dim_err("gather_rows", &s, &[indices.len()]));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= s[1]) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {} columns",
                s[1]
            )));
        }
        let x = self.values[input.0].data();
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| x[r * s[1] + c])
            .collect();
        let needs = self.any_grad(&[input]);
        self.push(
            "gather_rows",
            Tensor::vector(data),
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn row_normalize(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "row_normalize needs a matrix, got shape {s:?}"
            )));
        }
        let mut data = self.values[input.0].data().to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for (r, row) in data.chunks_mut(s[1].max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate {
                    op: "row_normalize",
                    reason: format!("row {r} has zero norm"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let needs = self.any_grad(&[input]);
        self.push(
            "row_normalize",
            Tensor::new(s, data)?,
            Op::RowNormalize { input, norms },
            needs,
        )
    }

    /// `a · bᵀ` for `a`: b×d and `b`: k×d.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(dim_err("matmul_nt", &sa, &sb));
        }
        let (m, d, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        linalg::gemm(
            m,
            d,
            n,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            true,
            0.0,
            &mut out,
        );
        let needs = self.any_grad(&[a, b]);
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), needs)
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a parameter. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let mut acc = Accumulator {
                values: &self.values,
                grads: &mut self.grads,
                needs: &self.needs_grad,
            };
            backprop(&self.ops[i], &self.values[i], &gy, &mut acc);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

struct Accumulator<'a> {
    values: &'a [Tensor],
    grads: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn value(&self, v: Var) -> &[f64] {
        self.values[v.0].data()
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    fn buf(&mut self, v: Var) -> &mut [f64] {
        let len = self.values[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn add(&mut self, v: Var, contrib: impl IntoIterator<Item = f64>) {
        if !self.wants(v) {
            return;
        }
        for (g, c) in self.buf(v).iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

fn backprop(op: &Op, out: &Tensor, gy: &[f64], acc: &mut Accumulator<'_>) {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernels,
            bias,
            geometry,
            cols,
        } => {
            let c_out = out.shape()[0];
            let (k, n) = (geometry.patch_len(), geometry.out_len());
            if acc.wants(*bias) {
                let gb: Vec<f64> = gy.chunks(n).map(|row| row.iter().sum()).collect();
                acc.add(*bias, gb);
            }
            if acc.wants(*kernels) {
                let gk = acc.buf(*kernels);
                linalg::gemm(c_out, n, k, gy, false, cols, true, 1.0, gk);
            }
            if acc.wants(*input) {
                let mut gcols = vec![0.0; k * n];
                linalg::gemm(k, c_out, n, acc.value(*kernels), true, gy, false, 0.0, &mut gcols);
                linalg::col2im_add(&gcols, geometry, acc.buf(*input));
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if acc.wants(*input) {
                let gi = acc.buf(*input);
                for (&idx, &g) in argmax.iter().zip(gy) {
                    gi[idx] += g;
                }
            }
        }
        Op::Relu(input) => {
            let contrib: Vec<f64> = out
                .data()
                .iter()
                .zip(gy)
                .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                .collect();
            acc.add(*input, contrib);
        }
        Op::Dense {
            input,
            weights,
            bias,
        } => {
            let n = acc.value(*input).len();
            acc.add(*bias, gy.iter().copied());
            if acc.wants(*weights) {
                let values = acc.values;
                let x = values[input.0].data();
                let gw = acc.buf(*weights);
                for (row, &g) in gw.chunks_mut(n).zip(gy) {
                    if g != 0.0 {
                        row.iter_mut().zip(x).for_each(|(w, &xi)| *w += g * xi);
                    }
                }
            }
            if acc.wants(*input) {
                let w = acc.value(*weights);
                let mut gx = vec![0.0; n];
                for (row, &g) in w.chunks(n).zip(gy) {
                    if g != 0.0 {
                        gx.iter_mut().zip(row).for_each(|(d, &wi)| *d += g * wi);
                    }
                }
                acc.add(*input, gx);
            }
        }
        Op::LinearRows {
            input,
            weights,
            bias,
        } => {
            let (rows, m) = (out.shape()[0], out.shape()[1]);
            let n = acc.values[input.0].shape()[1];
            if acc.wants(*bias) {
                let mut gb = vec![0.0; m];
                for row in gy.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc.add(*bias, gb);
            }
            if acc.wants(*weights) {
                let values = acc.values;
                let x = values[input.0].data();
                linalg::gemm(m, rows, n, gy, true, x, false, 1.0, acc.buf(*weights));
            }
            if acc.wants(*input) {
                let values = acc.values;
                let w = values[weights.0].data();
                linalg::gemm(rows, m, n, gy, false, w, false, 1.0, acc.buf(*input));
            }
        }
        Op::SoftmaxRows(input) => {
            let k = out.shape()[1];
            let mut contrib = Vec::with_capacity(out.len());
            for (y, g) in out.data().chunks(k).zip(gy.chunks(k)) {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                contrib.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            acc.add(*input, contrib);
        }
        Op::Softmax(input) => {
            let y = out.data();
            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
            let contrib: Vec<f64> = y.iter().zip(gy).map(|(&yi, &g)| yi * (g - dot)).collect();
            acc.add(*input, contrib);
        }
        Op::LogSoftmaxRows(input) => {
            let k = out.shape()[1];
            let mut contrib = Vec::with_capacity(out.len());
            for (row, grow) in out.data().chunks(k).zip(gy.chunks(k)) {
                let total: f64 = grow.iter().sum();
                contrib.extend(row.iter().zip(grow).map(|(&ly, &g)| g - ly.exp() * total));
            }
            acc.add(*input, contrib);
        }
        Op::Concat(a, b) => {
            let rows = if out.rank() == 2 { out.shape()[0] } else { 1 };
            let wa = acc.value(*a).len() / rows.max(1);
            let width = out.len() / rows.max(1);
            if rows == 0 || width == 0 {
                return;
            }
            let ga: Vec<f64> = gy.chunks(width).flat_map(|r| r[..wa].to_vec()).collect();
            let gb: Vec<f64> = gy.chunks(width).flat_map(|r| r[wa..].to_vec()).collect();
            acc.add(*a, ga);
            acc.add(*b, gb);
        }
        Op::Reshape(input) => acc.add(*input, gy.iter().copied()),
        Op::Stack(rows) => {
            let width = out.shape()[1];
            for (r, chunk) in rows.iter().zip(gy.chunks(width.max(1))) {
                acc.add(*r, chunk.iter().copied());
            }
        }
        Op::Sum(input) => {
            let n = acc.value(*input).len();
            acc.add(*input, std::iter::repeat_n(gy[0], n));
        }
        Op::Mean(input) => {
            let n = acc.value(*input).len();
            acc.add(*input, std::iter::repeat_n(gy[0] / n as f64, n));
        }
        Op::Add(a, b) => {
            acc.add(*a, gy.iter().copied());
            acc.add(*b, gy.iter().copied());
        }
        Op::Mul(a, b) => {
            let ga: Vec<f64> = acc.value(*b).iter().zip(gy).map(|(x, g)| x * g).collect();
            let gb: Vec<f64> = acc.value(*a).iter().zip(gy).map(|(x, g)| x * g).collect();
            acc.add(*a, ga);
            acc.add(*b, gb);
        }
        Op::Scale(input, factor) => acc.add(*input, gy.iter().map(|g| g * factor)),
        Op::AddConst(input) => acc.add(*input, gy.iter().copied()),
        Op::Log(input) => {
            let contrib: Vec<f64> = acc.value(*input).iter().zip(gy).map(|(x, g)| g / x).collect();
            acc.add(*input, contrib);
        }
        Op::Clamp { input, lo, hi } => {
            let contrib: Vec<f64> = acc
                .value(*input)
                .iter()
                .zip(gy)
                .map(|(x, &g)| if *x >= *lo && *x <= *hi { g } else { 0.0 })
                .collect();
            acc.add(*input, contrib);
        }
        Op::Gather { input, indices } => {
            if acc.wants(*input) {
                let cols = acc.values[input.0].shape()[1];
                let gi = acc.buf(*input);
                for (r, (&c, &g)) in indices.iter().zip(gy).enumerate() {
                    gi[r * cols + c] += g;
                }
            }
        }
        Op::RowNormalize { input, norms } => {
            let d = out.shape()[1];
            let mut contrib = Vec::with_capacity(out.len());
            for ((y, g), norm) in out.data().chunks(d).zip(gy.chunks(d)).zip(norms) {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                contrib.extend(y.iter().zip(g).map(|(yi, gi)| (gi - yi * dot) / norm));
            }
            acc.add(*input, contrib);
        }
        Op::MatMulNt(a, b) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let d = acc.values[a.0].shape()[1];
            if acc.wants(*a) {
                let mut ga = vec![0.0; m * d];
                linalg::gemm(m, n, d, gy, false, acc.value(*b), false, 0.0, &mut ga);
                acc.add(*a, ga);
            }
            if acc.wants(*b) {
                let mut gb = vec![0.0; n * d];
                linalg::gemm(n, m, d, gy, true, acc.value(*a), false, 0.0, &mut gb);
                acc.add(*b, gb);
            }
        }
    }
}
