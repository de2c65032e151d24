//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every differentiable operation as a node in execution
//! order. `backward` walks the nodes in reverse, visiting each once and
//! accumulating vector-Jacobian products into the nodes it consumed.
//! Parameters are borrowed from a [`ParamStore`] rather than copied; their
//! gradients are read back through [`Tape::param_grads`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Geometry of a 2-D convolution over an HWC-flattened input
/// (`[height·width × channels]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_index, in_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let patch = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let pixel = iy as usize * self.width + ix as usize;
                        let base = (ky * self.kernel + kx) * self.channels;
                        for c in 0..self.channels {
                            f(row * patch + base + c, pixel * self.channels + c);
                        }
                    }
                }
            }
        }
    }
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    LnClamped(Var, f64),
    Abs(Var),
    Softmax(Var),
    Reduce { x: Var, axis: usize, mean: bool },
    Normalize { x: Var, rstd: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    RepeatRows { x: Var, counts: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Im2Col { x: Var, geom: ConvGeom },
    DepthwiseConv { x: Var, kernel: Var, heads: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn value_of<'a>(nodes: &'a [Node], params: &'a ParamStore, v: Var) -> &'a [f64] {
    match &nodes[v.0].value {
        Value::Owned(d) => d,
        Value::Param(id) => params.get(*id).data(),
    }
}

/// Mutable gradient buffer for `v`, created zeroed on first use; `None`
/// when `v` does not need a gradient.
fn grad_slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.shape.iter().product();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op,
            left: shape.to_vec(),
            right: vec![2],
        }),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grads: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        value_of(&self.nodes, self.params, v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            shape: self.params.get(id).shape().to_vec(),
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise `a ∘ b`. Equal shapes combine directly; otherwise `b`
    /// must be a vector matching `a`'s trailing dimension and is applied to
    /// every row.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElementwiseKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let (x, y) = (self.value(a), self.value(b));
            let out: Vec<f64> = match kind {
                ElementwiseKind::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
                ElementwiseKind::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
                ElementwiseKind::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            };
            let op = match kind {
                ElementwiseKind::Add => Op::Add(a, b),
                ElementwiseKind::Sub => Op::Sub(a, b),
                ElementwiseKind::Mul => Op::Mul(a, b),
            };
            return Ok(self.push(sa, out, op, rg));
        }
        let d = sa.last().copied().unwrap_or(1);
        let row_like = match sb.as_slice() {
            [n] => *n == d,
            [1, n] => *n == d,
            _ => false,
        };
        if sa.is_empty() || !row_like {
            return Err(Error::Shape {
                op: "elementwise",
                left: sa,
                right: sb,
            });
        }
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = x
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter().zip(y).map(move |(p, q)| match kind {
                    ElementwiseKind::Add => p + q,
                    ElementwiseKind::Sub => p - q,
                    ElementwiseKind::Mul => p * q,
                })
            })
            .collect();
        let op = match kind {
            ElementwiseKind::Add => Op::AddRow(a, b),
            ElementwiseKind::Sub => Op::SubRow(a, b),
            ElementwiseKind::Mul => Op::MulRow(a, b),
        };
        Ok(self.push(sa, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), libm::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::LnClamped(a, floor), |v| libm::log(v.max(floor)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), libm::fabs)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.shape(a).last().copied().unwrap_or(1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    // ---- reductions ---------------------------------------------------

    /// Sum or mean along `axis`; the axis is removed from the shape.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mean = kind == ReduceKind::Mean;
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::Reduce { x: a, axis, mean }, rg))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let flat = self.flatten(a);
        self.reduce(flat, ReduceKind::Sum, 0).expect("rank-1 axis 0")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let flat = self.flatten(a);
        self.reduce(flat, ReduceKind::Mean, 0).expect("rank-1 axis 0")
    }

    fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        if self.shape(a) == [n] {
            a
        } else {
            self.reshape(a, &[n]).expect("same element count")
        }
    }

    /// Per-row standardization over the last axis: `(x - mean) / sqrt(var + eps)`
    /// with population variance. No affine terms.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let d = self.shape(a).last().copied().unwrap_or(1);
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / d);
        for row in x.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd.push(r);
            out.extend(row.iter().map(|v| (v - mean) * r));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Normalize { x: a, rstd }, rg)
    }

    // ---- indexing and layout -----------------------------------------

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("gather_rows", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding id",
                index: bad,
                bound: v,
            });
        }
        if ids.is_empty() {
            return Err(Error::input("embedding lookup with no ids"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats row `i` of `x` `counts[i]` times, in order.
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let (l, d) = dims2("repeat_rows", self.shape(x))?;
        if counts.len() != l {
            return Err(Error::Shape {
                op: "repeat_rows",
                left: vec![l],
                right: vec![counts.len()],
            });
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::input("repeat_rows produces no rows"));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(total * d);
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![total, d],
            out,
            Op::RepeatRows {
                x,
                counts: counts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.shape(x))?;
        if len == 0 || start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::input("concat_cols of zero tensors"))?;
        let (r, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.shape(p))?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Unfolds convolution patches: `[H·W × C]` → `[oH·oW × k·k·C]`, zero padded.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let expect = [geom.height * geom.width, geom.channels];
        if self.shape(x) != expect {
            return Err(Error::Shape {
                op: "im2col",
                left: self.shape(x).to_vec(),
                right: expect.to_vec(),
            });
        }
        let rows = geom.out_height() * geom.out_width();
        let mut out = vec![0.0; rows * geom.patch_len()];
        let src = self.value(x);
        geom.for_each_tap(|dst, idx| out[dst] = src[idx]);
        let rg = self.rg(x);
        Ok(self.push(vec![rows, geom.patch_len()], out, Op::Im2Col { x, geom }, rg))
    }

    /// Depthwise convolution along rows (time) with zero "same" padding.
    /// `kernel` is `[heads × k]`; channel `c` uses head `c / (d / heads)`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (l, d) = dims2("depthwise_conv", self.shape(x))?;
        let (heads, k) = dims2("depthwise_conv", self.shape(kernel))?;
        if heads == 0 || d % heads != 0 || k % 2 == 0 {
            return Err(Error::Shape {
                op: "depthwise_conv",
                left: vec![l, d],
                right: vec![heads, k],
            });
        }
        let group = d / heads;
        let half = k / 2;
        let (xs, ks) = (self.value(x), self.value(kernel));
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src_row = &xs[src as usize * d..(src as usize + 1) * d];
                let dst_row = &mut out[t * d..(t + 1) * d];
                for (c, (o, v)) in dst_row.iter_mut().zip(src_row).enumerate() {
                    *o += ks[(c / group) * k + j] * v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            vec![l, d],
            out,
            Op::DepthwiseConv { x, kernel, heads },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.clone()));
        }
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars[id.index()].and_then(|v| self.grad(v))
    }

    /// Gradients of every parameter that took part in the graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .ids()
            .filter_map(move |id| self.param_grad(id).map(|g| (id, g)))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Tape {
            params,
            nodes,
            grads,
            ..
        } = self;
        let params: &ParamStore = params;
        let nodes: &[Node] = nodes;
        let val = |v: Var| value_of(nodes, params, v);
        let out_val = || value_of(nodes, params, Var(i));
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let gm = MatRef::row_major(g, m, n);
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    gemm(gm, MatRef::row_major(val(*b), k, n).t(), 1.0, ga);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    gemm(MatRef::row_major(val(*a), m, k).t(), gm, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = grad_slot(grads, nodes, *v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(nodes[i].op, Op::SubRow(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(acc, s)| *acc += sign * s);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let d = nodes[b.0].shape.iter().product::<usize>();
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    let y = val(*b);
                    for (grow, srow) in ga.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for ((acc, s), w) in grow.iter_mut().zip(srow).zip(y) {
                            *acc += s * w;
                        }
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    let x = val(*a);
                    for (xrow, srow) in x.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for ((acc, s), xv) in gb.iter_mut().zip(srow).zip(xrow) {
                            *acc += s * xv;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(out_val()) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(out_val()) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(out_val()) {
                        *d += s * y;
                    }
                }
            }
            Op::LnClamped(a, floor) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *x > *floor {
                            *d += s / x;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *x > 0.0 {
                            *d += s;
                        } else if *x < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = nodes[i].shape.last().copied().unwrap_or(1);
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    let y = out_val();
                    for ((grow, srow), yrow) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: f64 = srow.iter().zip(yrow).map(|(s, y)| s * y).sum();
                        for ((acc, s), y) in grow.iter_mut().zip(srow).zip(yrow) {
                            *acc += y * (s - dot);
                        }
                    }
                }
            }
            Op::Reduce { x, axis, mean } => {
                let shape = &nodes[x.0].shape;
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = if *mean { 1.0 / n as f64 } else { 1.0 };
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * scale);
                        }
                    }
                }
            }
            Op::Normalize { x, rstd } => {
                let d = nodes[i].shape.last().copied().unwrap_or(1);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let xhat = out_val();
                    for (((grow, srow), hrow), r) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstd)
                    {
                        let mean_g = srow.iter().sum::<f64>() / d as f64;
                        let mean_gh =
                            srow.iter().zip(hrow).map(|(s, h)| s * h).sum::<f64>() / d as f64;
                        for ((acc, s), h) in grow.iter_mut().zip(srow).zip(hrow) {
                            *acc += r * (s - mean_g - h * mean_gh);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].shape[1];
                if let Some(gt) = grad_slot(grads, nodes, *table) {
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(acc, s)| *acc += s);
                    }
                }
            }
            Op::RepeatRows { x, counts } => {
                let d = nodes[x.0].shape[1];
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let mut rows = g.chunks_exact(d);
                    for (i, &c) in counts.iter().enumerate() {
                        let dst = &mut gx[i * d..(i + 1) * d];
                        for row in rows.by_ref().take(c) {
                            dst.iter_mut().zip(row).for_each(|(acc, s)| *acc += s);
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = nodes[x.0].shape[1];
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(acc, s)| *acc += s);
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let len = nodes[i].shape[1];
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (grow, srow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        grow[*start..start + len]
                            .iter_mut()
                            .zip(srow)
                            .for_each(|(acc, s)| *acc += s);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = grad_slot(grads, nodes, *p) {
                        for (grow, srow) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            grow.iter_mut()
                                .zip(&srow[offset..offset + w])
                                .for_each(|(acc, s)| *acc += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(acc, s)| *acc += s);
                }
            }
            Op::Im2Col { x, geom } => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    geom.for_each_tap(|dst, idx| gx[idx] += g[dst]);
                }
            }
            Op::DepthwiseConv { x, kernel, heads } => {
                let (l, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let k = nodes[kernel.0].shape[1];
                let group = d / heads;
                let half = k / 2;
                let (xs, ks) = (val(*x), val(*kernel));
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for t in 0..l {
                        for j in 0..k {
                            let src = t as isize + j as isize - half as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let s = src as usize;
                            for c in 0..d {
                                gx[s * d + c] += ks[(c / group) * k + j] * g[t * d + c];
                            }
                        }
                    }
                }
                if let Some(gk) = grad_slot(grads, nodes, *kernel) {
                    for t in 0..l {
                        for j in 0..k {
                            let src = t as isize + j as isize - half as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let s = src as usize;
                            for c in 0..d {
                                gk[(c / group) * k + j] += g[t * d + c] * xs[s * d + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
