//! Eager reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Nodes are only ever appended, so index order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::flops::FlopCounter;
use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, batch_dims, gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    DynConv(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    ClampMin(Var, T),
    Softmax(Var, usize),
    Sum(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Narrow { src: Var, axis: usize, start: usize },
    Concat { a: Var, b: Var, axis: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    flops: FlopCounter,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), flops: FlopCounter::default(), params: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &str) -> Result<Var> {
        let value = value.ensure_finite(what)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf that receives a gradient but is not a registered parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Requesting the same id twice returns the
    /// same node, so fan-out gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).cast());
        self.params.insert(id, v);
        v
    }

    /// Node registered for `id` in this pass, if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut flops = self.flops;
        let out = self.value(a).matmul(self.value(b), &mut flops)?;
        self.flops = flops;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::MatMul(a, b), g, "matmul")
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut flops = self.flops;
        let out = self.value(a).batch_matmul(self.value(b), &mut flops)?;
        self.flops = flops;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::BatchMatMul(a, b), g, "batch_matmul")
    }

    /// Per-slot 1×1 convolution: features `[N, C]`, kernels `[L, C, K]`
    /// give `[L, N, K]`. Counts `L·N·C·K` MACs.
    pub fn dyn_conv(&mut self, features: Var, kernels: Var) -> Result<Var> {
        let (n, c) = match self.shape(features) {
            &[n, c] => (n, c),
            s => return Err(dim_err!("dyn_conv features must be [N, C], got {s:?}")),
        };
        let (l, kc, k) = match self.shape(kernels) {
            &[l, kc, k] => (l, kc, k),
            s => return Err(dim_err!("dyn_conv kernels must be [L, C, K], got {s:?}")),
        };
        if kc != c {
            return Err(dim_err!("dyn_conv channel width {c} vs kernel width {kc}"));
        }
        let f = self.value(features).data();
        let kd = self.value(kernels).data();
        let mut out = vec![T::zero(); l * n * k];
        for s in 0..l {
            gemm_acc(f, &kd[s * c * k..(s + 1) * c * k], &mut out[s * n * k..(s + 1) * n * k], n, c, k);
        }
        self.flops.add((l * n * c * k) as u64);
        let out = Tensor::new(&[l, n, k], out)?;
        let g = self.grad_of(&[features, kernels]);
        self.push(out, Op::DynConv(features, kernels), g, "dyn_conv")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let g = self.grad_of(&[a]);
        self.push(out, Op::Transpose(a), g, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::Add(a, b), g, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::Sub(a, b), g, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::Mul(a, b), g, "mul")
    }

    /// Broadcast-add a vector `[n]` over the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.value(bias).len() != n || self.shape(bias).len() != 1 {
            return Err(dim_err!("bias {:?} does not broadcast over {:?}", self.shape(bias), self.shape(x)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        let g = self.grad_of(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), g, "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_real(factor);
        let out = self.value(a).map(|v| v * f);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, f), g, "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Exp(a), g, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::ln);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Log(a), g, "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let g = self.grad_of(&[a]);
        self.push(out, Op::Relu(a), g, "relu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::abs);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Abs(a), g, "abs")
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let f = T::from_real(floor);
        let out = self.value(a).map(|v| v.max(f));
        let g = self.grad_of(&[a]);
        self.push(out, Op::ClampMin(a, f), g, "clamp_min")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        let g = self.grad_of(&[a]);
        self.push(out, Op::Softmax(a, axis), g, "softmax")
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(out, Op::Sum(a), g, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let g = self.grad_of(&[a]);
        self.push(out, Op::Reshape(a), g, "reshape")
    }

    /// Selects slices along axis 0.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if rows.is_empty() {
            return Err(dim_err!("gather_rows with no indices"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(dim_err!("gather index {bad} out of range {}", shape[0]));
        }
        let stride: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&src[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let out = Tensor::new(&out_shape, data)?;
        let g = self.grad_of(&[a]);
        self.push(out, Op::GatherRows(a, rows.to_vec()), g, "gather_rows")
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, ext, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > ext {
            return Err(dim_err!("narrow [{start}, {}) outside extent {ext}", start + len));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        let g = self.grad_of(&[a]);
        self.push(out, Op::Narrow { src: a, axis, start }, g, "narrow")
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(dim_err!("cannot concat {sa:?} and {sb:?} on axis {axis}"));
        }
        let (outer, ea, inner) = axis_split(&sa, axis)?;
        let eb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * ea * inner..(o + 1) * ea * inner]);
            data.extend_from_slice(&db[o * eb * inner..(o + 1) * eb * inner]);
        }
        let mut shape = sa;
        shape[axis] = ea + eb;
        let out = Tensor::new(&shape, data)?;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::Concat { a, b, axis }, g, "concat")
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one())?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = batch_dims(av.shape(), bv.shape())?;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); bs * m * k];
                    for p in 0..bs {
                        gemm_nt_acc(
                            &g.data()[p * m * n..(p + 1) * m * n],
                            &bv.data()[p * k * n..(p + 1) * k * n],
                            &mut da[p * m * k..(p + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); bs * k * n];
                    for p in 0..bs {
                        gemm_tn_acc(
                            &av.data()[p * m * k..(p + 1) * m * k],
                            &g.data()[p * m * n..(p + 1) * m * n],
                            &mut db[p * k * n..(p + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::DynConv(f, kern) => {
                let (fv, kv) = (self.value(*f), self.value(*kern));
                let (n, c) = (fv.shape()[0], fv.shape()[1]);
                let (l, k) = (kv.shape()[0], kv.shape()[2]);
                if self.nodes[f.0].needs_grad {
                    let mut df = vec![T::zero(); n * c];
                    for s in 0..l {
                        gemm_nt_acc(
                            &g.data()[s * n * k..(s + 1) * n * k],
                            &kv.data()[s * c * k..(s + 1) * c * k],
                            &mut df,
                            n,
                            k,
                            c,
                        );
                    }
                    self.accumulate(grads, *f, Tensor::new(fv.shape(), df)?);
                }
                if self.nodes[kern.0].needs_grad {
                    let mut dk = vec![T::zero(); l * c * k];
                    for s in 0..l {
                        gemm_tn_acc(
                            fv.data(),
                            &g.data()[s * n * k..(s + 1) * n * k],
                            &mut dk[s * c * k..(s + 1) * c * k],
                            c,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *kern, Tensor::new(kv.shape(), dk)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?);
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[n], db)?);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * *f)),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)?),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x / y)?),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > T::zero() { x } else { T::zero() })?,
            ),
            Op::Abs(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| {
                    if y > T::zero() {
                        x
                    } else if y < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                })?,
            ),
            Op::ClampMin(a, f) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > *f { x } else { T::zero() })?,
            ),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis)?;
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|t| y[base + t * inner] * gd[base + t * inner]).sum();
                        for t in 0..len {
                            let p = base + t * inner;
                            dx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), dx)?);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s)?);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.reshape(self.shape(*a))?),
            Op::GatherRows(a, rows) => {
                if self.nodes[a.0].needs_grad {
                    let shape = self.shape(*a);
                    let stride: usize = shape[1..].iter().product();
                    let mut d = Tensor::zeros(shape)?;
                    for (slot, &r) in rows.iter().enumerate() {
                        let dst = &mut d.data_mut()[r * stride..(r + 1) * stride];
                        for (x, &v) in dst.iter_mut().zip(&g.data()[slot * stride..(slot + 1) * stride]) {
                            *x = *x + v;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Narrow { src, axis, start } => {
                if self.nodes[src.0].needs_grad {
                    let shape = self.shape(*src);
                    let (outer, ext, inner) = axis_split(shape, *axis)?;
                    let len = out.shape()[*axis];
                    let mut d = Tensor::zeros(shape)?;
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        d.data_mut()[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (outer, ea, inner) = axis_split(&sa, *axis)?;
                let eb = sb[*axis];
                let mut da = Vec::with_capacity(outer * ea * inner);
                let mut db = Vec::with_capacity(outer * eb * inner);
                let w = (ea + eb) * inner;
                for o in 0..outer {
                    da.extend_from_slice(&g.data()[o * w..o * w + ea * inner]);
                    db.extend_from_slice(&g.data()[o * w + ea * inner..(o + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(&sa, da)?);
                self.accumulate(grads, *b, Tensor::new(&sb, db)?);
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a stored parameter; zeros when the parameter was not
    /// reached by the loss or not used in the pass.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor<T> {
        self.params
            .get(&id)
            .and_then(|v| self.get(*v))
            .cloned()
            .unwrap_or_else(|| Tensor::<f64>::zeros(store.get(id).shape()).unwrap().cast())
    }
}
