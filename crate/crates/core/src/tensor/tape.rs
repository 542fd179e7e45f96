//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs were recorded before it, so a
//! single reverse sweep over the node list is a valid topological order.
//! Operations whose inputs do not require gradients are stored as constants
//! and never revisited by [`Tape::backward`].

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// A handle that names no recorded value; only for initialising fields.
    pub(crate) fn placeholder() -> Self {
        Var(usize::MAX)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<(u64, ParamId)> },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, m: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, r: usize, n: usize },
    MulRow { x: usize, r: usize, n: usize },
    Scale { a: usize, c: T },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { a: usize, n: usize, inv: Vec<T> },
    MeanRows { a: usize, rows: usize, n: usize },
    Sum { a: usize },
    Reshape { a: usize },
    SliceCols { a: usize, m: usize, n: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(usize, usize)>, m: usize },
    ConcatRows { parts: Vec<usize> },
    TemporalShift { a: usize, t: usize, m: usize, c: usize, fold: usize },
    DwConv1d { x: usize, w: usize, t: usize, d: usize, k: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AvgPool2 { a: usize, t: usize, h: usize, w: usize, c: usize },
    CrossEntropy { logits: usize, label: usize, probs: Vec<T> },
    WeightedRowSum { w: usize, v: usize, k: usize, d: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<(u64, ParamId), usize>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    /// Drops all recorded nodes so the tape can be reused for another forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_cache.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, inputs: &[usize]) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|&i| self.nodes[i].value.is_finite());
            assert!(!inputs_finite, "{op:?} produced a non-finite value from finite inputs");
        }
        let op = if requires_grad { op } else { Op::Leaf { param: None } };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an input tensor; `requires_grad` makes it a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad, &[])
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter from `store` once per tape; later calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&n) = self.param_cache.get(&key) {
            return Var(n);
        }
        let t = store.get(id);
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("stored parameter shape");
        value.set_requires_grad(false);
        let v = self.push(value, Op::Leaf { param: Some(key) }, t.requires_grad(), &[]);
        self.param_cache.insert(key, v.0);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let value = Tensor::new(&[n, m], kernels::transpose(self.value(a).data(), m, n))?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Transpose { a: a.0, m, n }, rg, &[a.0]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(self.shape(a), data)?, self.rg(&[a.0, b.0])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, rg, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg, &[a.0, b.0]))
    }

    fn row_operand(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let n = *self.shape(x).last().expect("non-empty shape");
        if self.value(r).numel() != n {
            return Err(Error::dim(op, self.shape(x), self.shape(r)));
        }
        Ok(n)
    }

    /// Adds a vector of length `n` to every length-`n` row along the last axis.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.row_operand(x, r, "add_row")?;
        let rv = self.value(r).data();
        let data = self.value(x).data().chunks(n).flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| a + b)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x.0, r.0]);
        Ok(self.push(value, Op::AddRow { x: x.0, r: r.0, n }, rg, &[x.0, r.0]))
    }

    /// Scales every length-`n` row along the last axis elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.row_operand(x, r, "mul_row")?;
        let rv = self.value(r).data();
        let data = self.value(x).data().chunks(n).flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| a * b)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x.0, r.0]);
        Ok(self.push(value, Op::MulRow { x: x.0, r: r.0, n }, rg, &[x.0, r.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Scale { a: a.0, c }, rg, &[a.0]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Gelu { a: a.0 }, rg, &[a.0]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Sigmoid { a: a.0 }, rg, &[a.0]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let value = Tensor::new(&shape, kernels::softmax(self.value(a).data(), outer, len, inner))?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Softmax { a: a.0, outer, len, inner }, rg, &[a.0]))
    }

    /// Standardises each row along the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let (y, inv) = kernels::layer_norm(self.value(a).data(), n, eps);
        let value = Tensor::new(&shape, y)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::LayerNorm { a: a.0, n, inv }, rg, &[a.0]))
    }

    /// Mean over all leading axes, giving `[1 × n]` for last-axis width `n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().expect("non-empty shape");
        let src = self.value(a).data();
        let rows = src.len() / n;
        let inv = T::one() / T::lit(rows as f64);
        let mut out = vec![T::zero(); n];
        for row in src.chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[1, n], out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::MeanRows { a: a.0, rows, n }, rg, &[a.0]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape { a: a.0 }, rg, &[a.0]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(a).data();
        let data = (0..m).flat_map(|i| src[i * n + start..i * n + start + len].iter().copied()).collect();
        let value = Tensor::new(&[m, len], data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::SliceCols { a: a.0, m, n, start, len }, rg, &[a.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p.0, pn));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &(id, w) in &widths {
                data.extend_from_slice(&self.nodes[id].value.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::ConcatCols { parts: widths, m }, rg, &ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::ConcatRows { parts: ids.clone() }, rg, &ids))
    }

    /// Shifts the first `fold` channels back one step in time and the next
    /// `fold` forward, zero-filling the vacated frames. The tensor is read as
    /// `[T, ..., C]`.
    pub fn temporal_shift(&mut self, a: Var, fold: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || 2 * fold > *shape.last().unwrap() {
            return Err(Error::dim("temporal_shift", &shape, &[fold]));
        }
        let t = shape[0];
        let c = *shape.last().unwrap();
        let m = self.value(a).numel() / (t * c);
        let value = Tensor::new(&shape, kernels::temporal_shift(self.value(a).data(), t, m, c, fold))?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::TemporalShift { a: a.0, t, m, c, fold }, rg, &[a.0]))
    }

    /// Depthwise temporal convolution of `x[T×D]` with kernels `w[D×k]`, zero padded.
    pub fn dwconv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, d) = self.dims2(x, "dwconv1d")?;
        let (wd, k) = self.dims2(w, "dwconv1d")?;
        if wd != d || k % 2 == 0 {
            return Err(Error::dim("dwconv1d", self.shape(x), self.shape(w)));
        }
        let data = kernels::dwconv1d(self.value(x).data(), self.value(w).data(), t, d, k);
        let value = Tensor::new(&[t, d], data)?;
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(value, Op::DwConv1d { x: x.0, w: w.0, t, d, k }, rg, &[x.0, w.0]))
    }

    /// Per-frame "same" convolution of `x[T,H,W,Cin]` with `w[k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let geom = match (xs, ws) {
            ([t, h, wd, cin], [k, k2, wcin, cout]) if k == k2 && wcin == cin && k % 2 == 1 => ConvGeom {
                t: *t,
                h: *h,
                w: *wd,
                cin: *cin,
                cout: *cout,
                k: *k,
            },
            _ => return Err(Error::dim("conv2d", xs, ws)),
        };
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), geom);
        let value = Tensor::new(&[geom.t, geom.h, geom.w, geom.cout], data)?;
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, geom }, rg, &[x.0, w.0]))
    }

    /// 2×2 spatial average pooling of `[T,H,W,C]` (even `H`, `W`).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (t, h, w, c) = match self.shape(a) {
            [t, h, w, c] if h % 2 == 0 && w % 2 == 0 => (*t, *h, *w, *c),
            s => return Err(Error::dim("avg_pool2", s, &[2, 2])),
        };
        let value = Tensor::new(&[t, h / 2, w / 2, c], kernels::avg_pool2(self.value(a).data(), t, h, w, c))?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::AvgPool2 { a: a.0, t, h, w, c }, rg, &[a.0]))
    }

    /// `-log softmax(logits)[label]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        let c = z.len();
        if label >= c {
            return Err(Error::contract(format!("label {label} out of range for {c} classes")));
        }
        let probs = kernels::softmax(z, 1, c, 1);
        let mx = z.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut exps: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
        let lse = mx + kernels::canonical_sum(&mut exps).ln();
        let loss = lse - z[label];
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                label,
                probs,
            },
            rg,
            &[logits.0],
        ))
    }

    /// `out[1×D] = Σ_k w[k] · v[k, :]`, summed in an order independent of row order.
    pub fn weighted_row_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (k, d) = self.dims2(v, "weighted_row_sum")?;
        if self.value(w).numel() != k {
            return Err(Error::dim("weighted_row_sum", self.shape(w), self.shape(v)));
        }
        let (wv, vv) = (self.value(w).data(), self.value(v).data());
        let mut buf = Vec::with_capacity(k);
        let out = (0..d)
            .map(|j| {
                buf.clear();
                buf.extend((0..k).map(|i| wv[i] * vv[i * d + j]));
                kernels::canonical_sum(&mut buf)
            })
            .collect();
        let value = Tensor::new(&[1, d], out)?;
        let rg = self.rg(&[w.0, v.0]);
        Ok(self.push(value, Op::WeightedRowSum { w: w.0, v: v.0, k, d }, rg, &[w.0, v.0]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter leaf from `store` into its tensor.
    pub fn accumulate_into(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Leaf { param: Some((uid, pid)) }, Some(g)) = (&node.op, g) {
                if *uid == store.uid() {
                    store.get_mut(*pid).accumulate_grad(g);
                }
            }
        }
    }

    /// [`Tape::backward`] followed by [`Tape::accumulate_into`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store);
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn val(&self, id: usize) -> &[T] {
        self.nodes[id].value.data()
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.slot(grads, a) {
                    kernels::matmul_grad_a(g, self.val(b), da, m, k, n);
                }
                if let Some(db) = self.slot(grads, b) {
                    kernels::matmul_grad_b(self.val(a), g, db, m, k, n);
                }
            }
            &Op::Transpose { a, m, n } => {
                if let Some(da) = self.slot(grads, a) {
                    let gt = kernels::transpose(g, n, m);
                    da.iter_mut().zip(gt).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Add { a, b } => {
                for x in [a, b] {
                    if let Some(dx) = self.slot(grads, x) {
                        dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).zip(self.val(b)).for_each(|((d, &v), &o)| *d += v * o);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.iter_mut().zip(g).zip(self.val(a)).for_each(|((d, &v), &o)| *d += v * o);
                }
            }
            &Op::AddRow { x, r, n } => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(dr) = self.slot(grads, r) {
                    for row in g.chunks(n) {
                        dr.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::MulRow { x, r, n } => {
                let rv = self.val(r);
                if let Some(dx) = self.slot(grads, x) {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        drow.iter_mut().zip(grow).zip(rv).for_each(|((d, &v), &s)| *d += v * s);
                    }
                }
                let xv = self.val(x);
                if let Some(dr) = self.slot(grads, r) {
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        dr.iter_mut().zip(grow).zip(xrow).for_each(|((d, &v), &s)| *d += v * s);
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            &Op::Gelu { a } => {
                let xv = self.val(a);
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).zip(xv).for_each(|((d, &v), &x)| *d += v * kernels::gelu_deriv(x));
                }
            }
            &Op::Sigmoid { a } => {
                let y = node.value.data();
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).zip(y).for_each(|((d, &v), &s)| *d += v * s * (T::one() - s));
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                if let Some(da) = self.slot(grads, a) {
                    kernels::softmax_grad(node.value.data(), g, da, outer, len, inner);
                }
            }
            Op::LayerNorm { a, n, inv } => {
                if let Some(da) = self.slot(grads, *a) {
                    kernels::layer_norm_grad(node.value.data(), inv, g, da, *n);
                }
            }
            &Op::MeanRows { a, rows, n } => {
                let inv = T::one() / T::lit(rows as f64);
                if let Some(da) = self.slot(grads, a) {
                    for row in da.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, &v)| *d += v * inv);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            &Op::SliceCols { a, m, n, start, len } => {
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..m {
                        da[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::ConcatCols { parts, m } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(pid, w) in parts {
                    if let Some(dp) = self.slot(grads, pid) {
                        for i in 0..*m {
                            dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + off..i * total + off + w])
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &pid in parts {
                    let len = self.nodes[pid].value.numel();
                    if let Some(dp) = self.slot(grads, pid) {
                        dp.iter_mut().zip(&g[off..off + len]).for_each(|(d, &v)| *d += v);
                    }
                    off += len;
                }
            }
            &Op::TemporalShift { a, t, m, c, fold } => {
                if let Some(da) = self.slot(grads, a) {
                    kernels::temporal_shift_grad(g, da, t, m, c, fold);
                }
            }
            &Op::DwConv1d { x, w, t, d, k } => {
                let (xv, wv) = (self.val(x), self.val(w));
                if let Some(dx) = self.slot(grads, x) {
                    kernels::dwconv1d_grad(xv, wv, g, Some(dx), None, t, d, k);
                }
                if let Some(dw) = self.slot(grads, w) {
                    kernels::dwconv1d_grad(xv, wv, g, None, Some(dw), t, d, k);
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.val(x), self.val(w));
                if let Some(dx) = self.slot(grads, x) {
                    kernels::conv2d_grad(xv, wv, g, Some(dx), None, geom);
                }
                if let Some(dw) = self.slot(grads, w) {
                    kernels::conv2d_grad(xv, wv, g, None, Some(dw), geom);
                }
            }
            &Op::AvgPool2 { a, t, h, w, c } => {
                if let Some(da) = self.slot(grads, a) {
                    kernels::avg_pool2_grad(g, da, t, h, w, c);
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { T::one() } else { T::zero() };
                        *d += g[0] * (p - target);
                    }
                }
            }
            &Op::WeightedRowSum { w, v, k, d } => {
                let (wv, vv) = (self.val(w), self.val(v));
                if let Some(dw) = self.slot(grads, w) {
                    for i in 0..k {
                        dw[i] += (0..d).fold(T::zero(), |acc, j| acc + g[j] * vv[i * d + j]);
                    }
                }
                if let Some(dv) = self.slot(grads, v) {
                    for i in 0..k {
                        for j in 0..d {
                            dv[i * d + j] += wv[i] * g[j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let col = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let r = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.matmul(a, col).unwrap();
        assert_eq!(tape.value(r).data(), &[17.0, 39.0]);
        let r = tape.matmul(zero, a).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let _ = tape.param(&store, p);
        let c = tape.constant(Tensor::scalar(3.0));
        tape.backward_into(c, &mut store).unwrap();
        assert!(store.get(p).grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", t(&[2], &[1.0, -1.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let loss = tape.sum(x).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grads();
        assert_eq!(store.get(p).grad().unwrap(), &[0.0, 0.0]);
    }
}
