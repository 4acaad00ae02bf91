//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Only gradients of leaves created with `requires_grad`
//! are retained. The graph is generic over [`Scalar`], so a forward pass over
//! [`crate::tensor::Dual`] inputs followed by `backward` computes a
//! Hessian-vector product in the tangent lanes.

use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Separable bilinear resampling plan for `[C, H, W]` tensors
/// (half-pixel centers, edge clamped).
#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = (src - i0 as f64).clamp(0.0, 1.0);
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }
}

/// Sparse map writing warped patch pixels over a base image.
///
/// Each covered output pixel is a convex combination of up to four patch
/// pixels, applied identically to every channel plane.
#[derive(Debug, Clone)]
pub struct CompositeMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// `(output pixel index, [(patch pixel index, weight); 4])`
    pub entries: Vec<(usize, [(usize, f64); 4])>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Reshape(Var),
    ChannelAffine { x: Var, scale: Arc<Vec<f64>> },
    AddChannelBias { x: Var, bias: Var },
    AddRowBias { x: Var, bias: Var },
    Relu(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Resize { x: Var, plan: Arc<ResizePlan> },
    MeanSpatial(Var),
    Composite { theta: Var, base: Var, map: Arc<CompositeMap> },
    WeightedCe { logits: Var, targets: Arc<Vec<usize>>, weights: Arc<Vec<f64>>, probs: Vec<T> },
    Dot { x: Var, weights: Arc<Vec<f64>> },
    Sum(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v.scale(k));
        self.push(out, Op::Scale(x, k), &[x])
    }

    /// `x + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), c.shape());
        let data = vx
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + T::from_f64(b))
            .collect();
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::AddConst(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Per-channel `x·scale[c] + shift[c]` on a `[C, ...]` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[0];
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let plane = vx.len() / c;
        let mut data = Vec::with_capacity(vx.len());
        for ch in 0..c {
            let (s, t) = (T::from_f64(scale[ch]), T::from_f64(shift[ch]));
            data.extend(vx.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v * s + t));
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                scale: Arc::new(scale.to_vec()),
            },
            &[x],
        )
    }

    /// Broadcast-add a `[C]` vector over a `[C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.shape()[0];
        assert_eq!(vb.len(), c, "channel bias length");
        let plane = vx.len() / c;
        let mut data = vx.data().to_vec();
        for ch in 0..c {
            let b = vb.data()[ch];
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v += b;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    /// Broadcast-add a `[D]` vector to every row of an `[R, D]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().unwrap();
        assert_eq!(vb.len(), d, "row bias length");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::AddRowBias { x, bias }, &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v.re() > 0.0 { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// 2-D convolution, `x: [C, H, W]`, `w: [O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), stride, pad);
        self.push(out, Op::Conv2d { x, w, stride, pad }, &[x, w])
    }

    /// `[m, k] × [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        matmul_nn(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::from_vec(&[m, n], out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let out = Tensor::from_vec(&[c, r], transpose_data(vx.data(), r, c));
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = Tensor::from_vec(shape, softmax_data(vx.data(), outer, len, inner));
        self.push(
            out,
            Op::Softmax {
                x,
                outer,
                axis: len,
                inner,
            },
            &[x],
        )
    }

    /// Row-wise normalization of `[R, D]` to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let d = vx.shape()[1];
        let mut data = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.shape()[0]);
        for row in vx.data().chunks(d) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean.scale(1.0 / d as f64);
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var.scale(1.0 / d as f64);
            let inv = T::one() / (var + T::from_f64(EPS)).sqrt();
            inv_std.push(inv);
            data.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::from_vec(shape, data);
        self.push(out, Op::Gather { x, index }, &[x])
    }

    pub fn resize(&mut self, x: Var, plan: Arc<ResizePlan>) -> Var {
        let vx = self.value(x);
        assert_eq!(&vx.shape()[1..], &[plan.in_h, plan.in_w], "resize input shape");
        let c = vx.shape()[0];
        let out = resize_forward(vx.data(), c, &plan);
        let out = Tensor::from_vec(&[c, plan.out_h, plan.out_w], out);
        self.push(out, Op::Resize { x, plan }, &[x])
    }

    /// Mean over all but the leading axis: `[C, ...] → [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[0];
        let plane = vx.len() / c;
        let data = vx
            .data()
            .chunks(plane)
            .map(|p| {
                let mut s = T::zero();
                for &v in p {
                    s += v;
                }
                s.scale(1.0 / plane as f64)
            })
            .collect();
        let out = Tensor::from_vec(&[c], data);
        self.push(out, Op::MeanSpatial(x), &[x])
    }

    /// Overwrite `base: [C, H, W]` with warped `theta: [C, S, S]` where the
    /// map covers, clamping the result to `[0, 1]`.
    pub fn composite(&mut self, theta: Var, base: Var, map: Arc<CompositeMap>) -> Var {
        let (vt, vb) = (self.value(theta), self.value(base));
        assert_eq!(vb.shape(), &[map.channels, map.height, map.width]);
        assert_eq!(vt.shape(), &[map.channels, map.patch_size, map.patch_size]);
        let hw = map.height * map.width;
        let ss = map.patch_size * map.patch_size;
        let mut data = vb.data().to_vec();
        for c in 0..map.channels {
            let src = &vt.data()[c * ss..(c + 1) * ss];
            let dst = &mut data[c * hw..(c + 1) * hw];
            for (p, taps) in &map.entries {
                let mut acc = T::zero();
                for &(i, w) in taps {
                    if w != 0.0 {
                        acc += src[i].scale(w);
                    }
                }
                dst[*p] = clamp_unit(acc);
            }
        }
        let out = Tensor::from_vec(vb.shape(), data);
        self.push(out, Op::Composite { theta, base, map }, &[theta, base])
    }

    /// `Σ_i weights[i] · CE(softmax(logits[:, i]), targets[i])` for
    /// `logits: [C, ...]`. Pixels with zero weight contribute nothing.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Vec<usize>>,
        weights: Arc<Vec<f64>>,
    ) -> Var {
        let vl = self.value(logits);
        let c = vl.shape()[0];
        let n = vl.len() / c;
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let probs = softmax_data(vl.data(), 1, c, n);
        let mut total = T::zero();
        for i in 0..n {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            // -log p_t computed stably from the logits.
            let mut m = vl.data()[i];
            for k in 1..c {
                let v = vl.data()[k * n + i];
                if v.re() > m.re() {
                    m = v;
                }
            }
            let mut s = T::zero();
            for k in 0..c {
                s += (vl.data()[k * n + i] - m).exp();
            }
            let ce = m + s.ln() - vl.data()[targets[i] * n + i];
            total += ce.scale(w);
        }
        self.push(
            Tensor::scalar(total),
            Op::WeightedCe {
                logits,
                targets,
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// `Σ weights[i] · x[i]`
    pub fn dot_const(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), weights.len());
        let mut s = T::zero();
        for (&v, &w) in vx.data().iter().zip(weights.iter()) {
            if w != 0.0 {
                s += v.scale(w);
            }
        }
        self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar node, seeded with `1`.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, g.map(|v| v.scale(k)));
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::ChannelAffine { x, scale } => {
                let c = scale.len();
                let plane = g.len() / c;
                let mut d = g.data().to_vec();
                for (ch, &s) in scale.iter().enumerate() {
                    for v in &mut d[ch * plane..(ch + 1) * plane] {
                        *v = v.scale(s);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let plane = g.len() / c;
                    let d = g
                        .data()
                        .chunks(plane)
                        .map(|p| {
                            let mut s = T::zero();
                            for &v in p {
                                s += v;
                            }
                            s
                        })
                        .collect();
                    self.accumulate(grads, *bias, Tensor::from_vec(self.shape(*bias), d));
                }
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let mut acc = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(self.shape(*bias), acc));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| if xv.re() > 0.0 { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    let d = conv2d_grad_input(g, vw, vx.shape(), *stride, *pad);
                    self.accumulate(grads, *x, d);
                }
                if self.wants(*w) {
                    let d = conv2d_grad_weight(g, vx, vw.shape(), *stride, *pad);
                    self.accumulate(grads, *w, d);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut d = vec![T::zero(); m * k];
                    matmul_nt(g.data(), vb.data(), &mut d, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], d));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut d = vec![T::zero(); k * n];
                    matmul_tn(va.data(), g.data(), &mut d, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], d));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let d = transpose_data(g.data(), r, c);
                self.accumulate(grads, *x, Tensor::from_vec(&[c, r], d));
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let y = &node.value;
                let mut d = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * axis * inner + i;
                        let mut dot = T::zero();
                        for a in 0..*axis {
                            let j = base + a * inner;
                            dot += y.data()[j] * g.data()[j];
                        }
                        for a in 0..*axis {
                            let j = base + a * inner;
                            d[j] = y.data()[j] * (g.data()[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let dim = y.shape()[1];
                let inv_d = 1.0 / dim as f64;
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &inv) in y.data().chunks(dim).zip(g.data().chunks(dim)).zip(inv_std) {
                    let mut mg = T::zero();
                    let mut mgy = T::zero();
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        mg += gv;
                        mgy += gv * yv;
                    }
                    mg = mg.scale(inv_d);
                    mgy = mgy.scale(inv_d);
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| inv * (gv - mg - yv * mgy)));
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::Gather { x, index } => {
                let vx = self.value(*x);
                let mut d = Tensor::zeros(vx.shape());
                let dd = d.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Resize { x, plan } => {
                let c = g.shape()[0];
                let d = resize_backward(g.data(), c, plan);
                self.accumulate(grads, *x, Tensor::from_vec(&[c, plan.in_h, plan.in_w], d));
            }
            Op::MeanSpatial(x) => {
                let shape = self.shape(*x).to_vec();
                let c = shape[0];
                let n: usize = shape.iter().product();
                let plane = n / c;
                let mut d = Vec::with_capacity(n);
                for &gv in g.data() {
                    let v = gv.scale(1.0 / plane as f64);
                    d.extend(std::iter::repeat_n(v, plane));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&shape, d));
            }
            Op::Composite { theta, base, map } => {
                let hw = map.height * map.width;
                let ss = map.patch_size * map.patch_size;
                let vt = self.value(*theta);
                if self.wants(*theta) {
                    let mut d = vec![T::zero(); map.channels * ss];
                    for c in 0..map.channels {
                        let gp = &g.data()[c * hw..(c + 1) * hw];
                        let src = &vt.data()[c * ss..(c + 1) * ss];
                        let dst = &mut d[c * ss..(c + 1) * ss];
                        for (p, taps) in &map.entries {
                            // No gradient through saturated (clamped) outputs.
                            let pre: f64 = taps.iter().map(|&(i, w)| w * src[i].re()).sum();
                            if !(0.0..=1.0).contains(&pre) {
                                continue;
                            }
                            for &(i, w) in taps {
                                if w != 0.0 {
                                    dst[i] += gp[*p].scale(w);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *theta, Tensor::from_vec(self.shape(*theta), d));
                }
                if self.wants(*base) {
                    let mut d = g.data().to_vec();
                    for c in 0..map.channels {
                        for (p, _) in &map.entries {
                            d[c * hw + p] = T::zero();
                        }
                    }
                    self.accumulate(grads, *base, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::WeightedCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let g0 = g.data()[0];
                let shape = self.shape(*logits).to_vec();
                let c = shape[0];
                let n = probs.len() / c;
                let mut d = vec![T::zero(); probs.len()];
                for i in 0..n {
                    let w = weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    let gw = g0.scale(w);
                    for k in 0..c {
                        let mut p = probs[k * n + i];
                        if k == targets[i] {
                            p -= T::one();
                        }
                        d[k * n + i] = gw * p;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&shape, d));
            }
            Op::Dot { x, weights } => {
                let g0 = g.data()[0];
                let d = weights.iter().map(|&w| g0.scale(w)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), d));
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g0));
            }
        }
    }
}

#[inline]
fn clamp_unit<T: Scalar>(v: T) -> T {
    if v.re() < 0.0 {
        T::zero()
    } else if v.re() > 1.0 {
        T::one()
    } else {
        v
    }
}

fn softmax_data<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = x[base];
            for a in 1..len {
                let v = x[base + a * inner];
                if v.re() > m.re() {
                    m = v;
                }
            }
            let mut s = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - m).exp();
                out[base + a * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for a in 0..len {
                out[base + a * inner] *= inv;
            }
        }
    }
    out
}

fn transpose_data<T: Scalar>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel larger than padded input");
    (len + 2 * pad - k) / stride + 1
}

/// Output positions `o` whose input index `o·stride + off − pad` is in range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // o·s + off ≥ pad  and  o·s + off − pad < in_len
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let hi_excl = if in_len + pad > off {
        ((in_len + pad - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, c2, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(c, c2, "conv channel mismatch");
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut out = vec![T::zero(); o * oh * ow];
    let xd = x.data();
    let wdata = w.data();
    for oc in 0..o {
        let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let iplane = &xd[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, stride, ky, pad);
                for kx in 0..k {
                    let wv = wdata[((oc * c + ic) * k + ky) * k + kx];
                    let (x_lo, x_hi) = valid_range(ow, wd, stride, kx, pad);
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let irow = &iplane[iy * wd..(iy + 1) * wd];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = x_lo + kx - pad;
                            let n = x_hi - x_lo;
                            for (ov, &iv) in orow[x_lo..x_hi].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                orow[ox] += wv * irow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o, oh, ow], out)
}

fn conv2d_grad_input<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (c, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut d = vec![T::zero(); c * h * wd];
    for oc in 0..o {
        let gplane = &g.data()[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let dplane = &mut d[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, stride, ky, pad);
                for kx in 0..k {
                    let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                    let (x_lo, x_hi) = valid_range(ow, wd, stride, kx, pad);
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let drow = &mut dplane[iy * wd..(iy + 1) * wd];
                        if stride == 1 {
                            let ix0 = x_lo + kx - pad;
                            let n = x_hi - x_lo;
                            for (dv, &gv) in drow[ix0..ix0 + n].iter_mut().zip(&grow[x_lo..x_hi]) {
                                *dv += wv * gv;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                drow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, d)
}

fn conv2d_grad_weight<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w_shape[0], w_shape[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut d = vec![T::zero(); o * c * k * k];
    for oc in 0..o {
        let gplane = &g.data()[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let iplane = &x.data()[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, stride, ky, pad);
                for kx in 0..k {
                    let (x_lo, x_hi) = valid_range(ow, wd, stride, kx, pad);
                    let mut s = T::zero();
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &iplane[iy * wd..(iy + 1) * wd];
                        for ox in x_lo..x_hi {
                            s += grow[ox] * irow[ox * stride + kx - pad];
                        }
                    }
                    d[((oc * c + ic) * k + ky) * k + kx] = s;
                }
            }
        }
    }
    Tensor::from_vec(w_shape, d)
}

fn resize_forward<T: Scalar>(x: &[T], c: usize, plan: &ResizePlan) -> Vec<T> {
    let (ih, iw, oh, ow) = (plan.in_h, plan.in_w, plan.out_h, plan.out_w);
    let mut out = vec![T::zero(); c * oh * ow];
    // Rows first into a scratch buffer, then columns.
    let mut tmp = vec![T::zero(); oh * iw];
    for ch in 0..c {
        let src = &x[ch * ih * iw..(ch + 1) * ih * iw];
        for (oy, t) in plan.rows.iter().enumerate() {
            let r0 = &src[t.i0 * iw..(t.i0 + 1) * iw];
            let r1 = &src[t.i1 * iw..(t.i1 + 1) * iw];
            let dst = &mut tmp[oy * iw..(oy + 1) * iw];
            for ((d, &a), &b) in dst.iter_mut().zip(r0).zip(r1) {
                *d = a.scale(t.w0) + b.scale(t.w1);
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let row = &tmp[oy * iw..(oy + 1) * iw];
            for (ox, t) in plan.cols.iter().enumerate() {
                dst[oy * ow + ox] = row[t.i0].scale(t.w0) + row[t.i1].scale(t.w1);
            }
        }
    }
    out
}

fn resize_backward<T: Scalar>(g: &[T], c: usize, plan: &ResizePlan) -> Vec<T> {
    let (ih, iw, oh, ow) = (plan.in_h, plan.in_w, plan.out_h, plan.out_w);
    let mut d = vec![T::zero(); c * ih * iw];
    let mut tmp = vec![T::zero(); oh * iw];
    for ch in 0..c {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let row = &mut tmp[oy * iw..(oy + 1) * iw];
            for (ox, t) in plan.cols.iter().enumerate() {
                let gv = gsrc[oy * ow + ox];
                row[t.i0] += gv.scale(t.w0);
                row[t.i1] += gv.scale(t.w1);
            }
        }
        let dst = &mut d[ch * ih * iw..(ch + 1) * ih * iw];
        for (oy, t) in plan.rows.iter().enumerate() {
            for ix in 0..iw {
                let gv = tmp[oy * iw + ix];
                dst[t.i0 * iw + ix] += gv.scale(t.w0);
                dst[t.i1 * iw + ix] += gv.scale(t.w1);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks the analytic gradient of `f` at `x0` against central differences.
    fn check_grad(x0: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = f(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp, false);
                let y = f(&mut g, x);
                g.value(y).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - fd).abs() <= 1e-6 + 1e-5 * fd.abs(),
                "coordinate {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn weights(n: usize, seed: u64) -> Arc<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let x0 = rand_tensor(&mut rng, &[2, 7, 6]);
        for stride in [1, 2] {
            let wts = weights(3 * 7usize.div_ceil(stride) * 6usize.div_ceil(stride), 9);
            let w0c = w0.clone();
            check_grad(&x0, |g, x| {
                let w = g.constant(w0c.clone());
                let y = g.conv2d(x, w, stride, 1);
                g.dot_const(y, wts.clone())
            });
            let x0c = x0.clone();
            check_grad(&w0, |g, w| {
                let x = g.constant(x0c.clone());
                let y = g.conv2d(x, w, stride, 1);
                g.dot_const(y, wts.clone())
            });
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let x = rand_tensor(&mut rng, &[3, 5, 8]);
        let y = conv2d_forward(&x, &w, 2, 1);
        assert_eq!(y.shape(), &[2, 3, 4]);
        for oc in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut s = 0.0;
                    for ic in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 8 {
                                    s += w.data()[((oc * 3 + ic) * 3 + ky) * 3 + kx]
                                        * x.data()[(ic * 5 + iy as usize) * 8 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(oc * 3 + oy) * 4 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b0 = rand_tensor(&mut rng, &[4, 5]);
        let x0 = rand_tensor(&mut rng, &[3, 4]);
        let wts = weights(15, 4);
        check_grad(&x0, |g, x| {
            let b = g.constant(b0.clone());
            let n = g.layer_norm(x);
            let y = g.matmul(n, b);
            let s = g.softmax(y, 1);
            let t = g.transpose(s);
            let t = g.reshape(t, &[15]);
            g.dot_const(t, wts.clone())
        });
        let x0c = x0.clone();
        check_grad(&b0, |g, b| {
            let x = g.constant(x0c.clone());
            let y = g.matmul(x, b);
            let y = g.relu(y);
            let s = g.softmax(y, 0);
            let s = g.reshape(s, &[15]);
            g.dot_const(s, wts.clone())
        });
    }

    #[test]
    fn resize_gather_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, &[2, 3, 5]);
        let plan = Arc::new(ResizePlan::new(3, 5, 7, 4));
        let wts = weights(2 * 7 * 4, 6);
        check_grad(&x0, |g, x| {
            let y = g.resize(x, plan.clone());
            g.dot_const(y, wts.clone())
        });
        let index = Arc::new(vec![0, 3, 3, 7, 29, 11]);
        let w2 = weights(6 + 2, 7);
        check_grad(&x0, |g, x| {
            let y = g.gather(x, index.clone(), &[6]);
            let m = g.mean_spatial(x);
            let a = g.dot_const(y, Arc::new(w2[..6].to_vec()));
            let b = g.dot_const(m, Arc::new(w2[6..].to_vec()));
            let s = g.add(a, b);
            let s2 = g.mul(s, s);
            g.scale(s2, 0.5)
        });
    }

    #[test]
    fn weighted_cross_entropy_gradient_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_tensor(&mut rng, &[3, 2, 2]);
        let targets = Arc::new(vec![0, 2, 1, 1]);
        let w = Arc::new(vec![0.5, 0.0, 1.0, 2.0]);
        check_grad(&x0, |g, x| g.weighted_cross_entropy(x, targets.clone(), w.clone()));
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), false);
        let y = g.weighted_cross_entropy(x, targets.clone(), w.clone());
        let mut expect = 0.0;
        for i in 0..4 {
            let z: Vec<f64> = (0..3).map(|k| x0.data()[k * 4 + i]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += w[i] * (lse - z[targets[i]]);
        }
        assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dual_backward_gives_hessian_vector_product() {
        // f(x) = Σ softmax(Ax)·w ; compare H·v with finite differences of the gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = rand_tensor(&mut rng, &[4, 3]);
        let x0 = rand_tensor(&mut rng, &[3, 1]);
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wts = weights(4, 12);
        fn f<T: Scalar>(g: &mut Graph<T>, a: &Tensor<f64>, x: Var, w: &Arc<Vec<f64>>) -> Var {
            let a = g.constant(a.cast());
            let y = g.matmul(a, x);
            let s = g.softmax(y, 0);
            let s = g.mul(s, s);
            let s = g.reshape(s, &[4]);
            g.dot_const(s, w.clone())
        }
        let grad_at = |xv: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(xv.clone(), true);
            let y = f(&mut g, &a0, x, &wts);
            g.backward(y).get(x).unwrap().clone()
        };
        let mut g = Graph::<Dual>::new();
        let x = g.leaf(x0.with_tangent(&v), true);
        let y = f(&mut g, &a0, x, &wts);
        let hv = g.backward(y).get(x).unwrap().tangent();
        let h = 1e-5;
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        for i in 0..3 {
            xp.data_mut()[i] += h * v[i];
            xm.data_mut()[i] -= h * v[i];
        }
        let (gp, gm) = (grad_at(&xp), grad_at(&xm));
        for i in 0..3 {
            let fd = (gp.data()[i] - gm.data()[i]) / (2.0 * h);
            assert!((hv.data()[i] - fd).abs() < 1e-6, "{} vs {}", hv.data()[i], fd);
        }
    }

    #[test]
    fn composite_routes_gradient_to_patch() {
        let map = Arc::new(CompositeMap {
            channels: 1,
            height: 3,
            width: 3,
            patch_size: 2,
            entries: vec![(0, [(0, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)]), (4, [(1, 0.5), (3, 0.5), (0, 0.0), (0, 0.0)])],
        });
        let mut g = Graph::<f64>::new();
        let theta = g.leaf(Tensor::from_vec(&[1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]), true);
        let base = g.constant(Tensor::full(&[1, 3, 3], 0.1));
        let out = g.composite(theta, base, map);
        assert_eq!(g.value(out).data(), &[0.2, 0.1, 0.1, 0.1, 0.6000000000000001, 0.1, 0.1, 0.1, 0.1]);
        let s = g.sum(out);
        let grads = g.backward(s);
        assert_eq!(grads.get(theta).unwrap().data(), &[1.0, 0.5, 0.0, 0.5]);
    }
}
