use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::grid_sample::{self, Taps};
use super::kernels::{self, mm_nn, mm_nt, mm_tn};
use super::{Elem, Tensor, LAYER_NORM_EPS};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mse(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    GridSample {
        features: Var,
        taps: Vec<Taps>,
    },
    SelectRow {
        table: Var,
        row: usize,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of differentiable computation.
///
/// Every op pushes its output value; when any input requires a gradient the
/// op and whatever it needs for the backward pass are kept as well. A tape
/// created with [`Tape::inference`] never records.
pub struct Tape<T: Elem = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Elem = f32> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn cols<T: Elem>(x: &[T], rows: usize, width: usize, start: usize, len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + start..r * width + start + len]);
    }
    out
}

fn put_cols<T: Elem>(dst: &mut [T], src: &[T], rows: usize, width: usize, start: usize, len: usize) {
    for r in 0..rows {
        let d = &mut dst[r * width + start..r * width + start + len];
        for (a, &b) in d.iter_mut().zip(&src[r * len..(r + 1) * len]) {
            *a = *a + b;
        }
    }
}

fn col_sums<T: Elem>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

impl<T: Elem> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index()).ok_or(Error::NotOnTape)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("variable from another tape").value
    }

    fn value_arc(&self, v: Var) -> &Arc<Tensor<T>> {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn push_node(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.recording && inputs.iter().any(|&v| self.requires_grad(v));
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_node(Arc::new(value), op, rg))
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Arc::new(value), Op::Leaf, false)
    }

    /// Constant that shares its storage with the caller.
    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Trainable leaf (requires a gradient when the tape records).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.param_shared(Arc::new(value))
    }

    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        let rg = self.recording;
        self.push_node(value, Op::Leaf, rg)
    }

    /// Alias of `v` that is cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = Arc::clone(&self.node(v)?.value);
        Ok(self.push_node(value, Op::Leaf, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `x[n, d] + v` with `v` of `d` elements broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        let [_, d] = xv.dims2("add_row")?;
        if vv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(vv.data()) {
                *o = *o + b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, v), &[x, v])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let [m, k] = av.dims2("matmul")?;
        let [k2, n] = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (**self.value_arc(x)).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// `x[n, in] · w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, din] = xv.dims2("linear")?;
        let [din2, dout] = wv.dims2("linear")?;
        if din != din2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != dout {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        mm_nn(xv.data(), wv.data(), &mut out, n, din, dout);
        let out = Tensor::new(&[n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    /// Normalizes each row of `x[n, d]` and applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, d] = xv.dims2("layer_norm")?;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [_, d] = xv.dims2("softmax")?;
        let mut out = (*xv).clone();
        kernels::softmax_rows(out.data_mut(), d);
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split3(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Sub-range `[start, start + len)` of `x` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = split3(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&xv.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(&oshape, out)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        if start != self.value(x).shape()[axis] {
            return Err(Error::InvalidShape {
                op: "split",
                msg: format!("sizes {sizes:?} do not cover axis {axis}"),
            });
        }
        Ok(out)
    }

    /// Mean over one axis; the axis is removed (rank-0 results become `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "mean",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, n, inner) = split3(&shape, axis);
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let out = Tensor::new(&oshape, out)?;
        self.push("mean", out, Op::Mean { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.expect_same_shape(bv, "mse_loss")?;
        let n = T::of(av.numel() as f64);
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push("mse_loss", Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Multi-head scaled dot-product attention of `q[nq, dk]` over
    /// `k[nk, dk]`, `v[nk, dv]`, with `1/sqrt(dk/heads)` scaling.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [nq, dk] = qv.dims2("attention")?;
        let [nk, dk2] = kv.dims2("attention")?;
        let [nk2, dv] = vv.dims2("attention")?;
        if dk != dk2 || nk != nk2 || heads == 0 || dk % heads != 0 || dv % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = T::of(1.0 / (hk as f64).sqrt());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * dv];
        for h in 0..heads {
            let qh = cols(qv.data(), nq, dk, h * hk, hk);
            let kh = cols(kv.data(), nk, dk, h * hk, hk);
            let vh = cols(vv.data(), nk, dv, h * hv, hv);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            mm_nt(&qh, &kh, p, nq, hk, nk);
            for s in p.iter_mut() {
                *s = *s * scale;
            }
            kernels::softmax_rows(p, nk);
            let mut oh = vec![T::zero(); nq * hv];
            mm_nn(p, &vh, &mut oh, nq, nk, hv);
            put_cols(&mut out, &oh, nq, dv, h * hv, hv);
        }
        let out = Tensor::new(&[nq, dv], out)?;
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Differentiable (w.r.t. features) trilinear sampling; see
    /// [`grid_sample_3d`](super::grid_sample_3d).
    pub fn grid_sample_3d(&mut self, features: Var, queries: &Tensor<T>) -> Result<Var> {
        let fv = self.value(features);
        let (c, dims) = grid_sample::volume_dims(fv)?;
        let taps = grid_sample::query_taps(dims, queries)?;
        let voxels = dims.iter().product();
        let out = grid_sample::gather(fv.data(), c, voxels, &taps);
        let out = Tensor::new(&[taps.len(), c], out)?;
        self.push(
            "grid_sample_3d",
            out,
            Op::GridSample { features, taps },
            &[features],
        )
    }

    /// Row `row` of a `[rows, d]` table as a `[1, d]` matrix.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let tv = self.value(table);
        let [rows, d] = tv.dims2("select_row")?;
        if row >= rows {
            return Err(Error::InvalidShape {
                op: "select_row",
                msg: format!("row {row} of a {rows}-row table"),
            });
        }
        let out = Tensor::new(&[1, d], tv.data()[row * d..(row + 1) * d].to_vec())?;
        self.push("select_row", out, Op::SelectRow { table, row }, &[table])
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lnode = self.node(loss)?;
        if lnode.value.numel() != 1 {
            return Err(Error::NotScalar(lnode.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.index()] = Some(vec![T::one()]);

        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => {
                    Tensor::new(n.value.shape(), g).ok()
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.index()].requires_grad {
            return;
        }
        match &mut grads[v.index()] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index()].value
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
            Op::AddRow(x, v) => {
                let d = self.val(*v).numel();
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *v, col_sums(g, d));
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.val(*a).dims2("matmul")?;
                let [_, n] = self.val(*b).dims2("matmul")?;
                if self.nodes[a.index()].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    mm_nt(g, self.val(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.index()].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    mm_tn(self.val(*a).data(), g, &mut gb, k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let [r, c] = self.val(*x).dims2("transpose")?;
                let gt = Tensor::new(&[c, r], g.to_vec())?.transpose2()?;
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let [n, din] = self.val(*x).dims2("linear")?;
                let [_, dout] = self.val(*w).dims2("linear")?;
                if self.nodes[x.index()].requires_grad {
                    let mut gx = vec![T::zero(); n * din];
                    mm_nt(g, self.val(*w).data(), &mut gx, n, dout, din);
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[w.index()].requires_grad {
                    let mut gw = vec![T::zero(); din * dout];
                    mm_tn(self.val(*x).data(), g, &mut gw, din, n, dout);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, col_sums(g, dout));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.val(*gamma).numel();
                let gam = self.val(*gamma).data();
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * hr[j];
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gb[j] = gb[j] + gr[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = is * (dh - m1 - hr[j] * m2);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect(),
                );
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let [_, d] = node.value.dims2("softmax")?;
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split3(shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let n = self.val(p).shape()[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = o * total * inner;
                        gp.extend_from_slice(&g[base + start * inner..base + (start + n) * inner]);
                    }
                    self.accumulate(grads, p, gp);
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.val(*x).shape();
                let (outer, n, inner) = split3(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean { x, axis } => {
                let shape = self.val(*x).shape();
                let (outer, n, inner) = split3(shape, *axis);
                let inv = T::one() / T::of(n as f64);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.val(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let c = T::of(2.0) * g[0] / T::of(av.len() as f64);
                let ga: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                let gb = ga.iter().map(|&v| -v).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let [nq, dk] = qv.dims2("attention")?;
                let [nk, _] = kv.dims2("attention")?;
                let [_, dv] = vv.dims2("attention")?;
                let (hk, hv) = (dk / heads, dv / heads);
                let scale = T::of(1.0 / (hk as f64).sqrt());
                let mut gq = vec![T::zero(); nq * dk];
                let mut gk = vec![T::zero(); nk * dk];
                let mut gv = vec![T::zero(); nk * dv];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let qh = cols(qv.data(), nq, dk, h * hk, hk);
                    let kh = cols(kv.data(), nk, dk, h * hk, hk);
                    let vh = cols(vv.data(), nk, dv, h * hv, hv);
                    let goh = cols(g, nq, dv, h * hv, hv);
                    let mut dp = vec![T::zero(); nq * nk];
                    mm_nt(&goh, &vh, &mut dp, nq, hv, nk);
                    for (dpr, pr) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                        let dot: T = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for j in 0..nk {
                            dpr[j] = pr[j] * (dpr[j] - dot) * scale;
                        }
                    }
                    let mut gqh = vec![T::zero(); nq * hk];
                    mm_nn(&dp, &kh, &mut gqh, nq, nk, hk);
                    let mut gkh = vec![T::zero(); nk * hk];
                    mm_tn(&dp, &qh, &mut gkh, nk, nq, hk);
                    let mut gvh = vec![T::zero(); nk * hv];
                    mm_tn(p, &goh, &mut gvh, nk, nq, hv);
                    put_cols(&mut gq, &gqh, nq, dk, h * hk, hk);
                    put_cols(&mut gk, &gkh, nk, dk, h * hk, hk);
                    put_cols(&mut gv, &gvh, nk, dv, h * hv, hv);
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::GridSample { features, taps } => {
                let (c, dims) = grid_sample::volume_dims(self.val(*features))?;
                let voxels = dims.iter().product();
                self.accumulate(grads, *features, grid_sample::scatter(g, c, voxels, taps));
            }
            Op::SelectRow { table, row } => {
                let tv = self.val(*table);
                let [_, d] = tv.dims2("select_row")?;
                let mut gt = vec![T::zero(); tv.numel()];
                gt[row * d..(row + 1) * d].copy_from_slice(g);
                self.accumulate(grads, *table, gt);
            }
        }
        Ok(())
    }
}
