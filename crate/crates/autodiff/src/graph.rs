//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation on a [`Var`]
//! evaluates eagerly and records enough state to run its adjoint. Calling
//! [`Graph::backward`] walks the arena once in reverse creation order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::warp::{warp_bilinear_plane, warp_bilinear_plane_backward};
use crate::{Real, Tensor};

/// Batch-normalization behaviour for one forward pass.
#[derive(Clone, Debug)]
pub enum BnMode<T> {
    /// Normalize with statistics of the current batch.
    Train { eps: T },
    /// Normalize with externally tracked running statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

/// Per-channel batch statistics measured during a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    ScaleBy(usize, usize),
    Element(usize, usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Clamp(usize, T, T),
    Sum(usize),
    SumPerSample(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    IndexBatch { x: usize, index: usize },
    ConcatBatch(Vec<usize>),
    SliceBatch { x: usize, start: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ChannelBias { x: usize, b: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MatMul(usize, usize),
    Transpose(usize),
    RowBias(usize, usize),
    Upsample { x: usize, factor: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    AvgPool { x: usize, kernel: usize, stride: usize },
    MinMaxNorm { x: usize, argmin: Vec<usize>, argmax: Vec<usize>, range: Vec<T> },
    MeanChannels(usize),
    Warp { img: usize, field: usize },
    JointHistogram { a: usize, b: usize, bins: usize },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ScaleBy(a, b) | MatMul(a, b) | RowBias(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddScalar(a) | Element(a, _) | Relu(a) | LeakyRelu(a, _) | Tanh(a) | Sigmoid(a)
            | Log(a) | Exp(a) | Abs(a) | Square(a) | Clamp(a, _, _) | Sum(a) | SumPerSample(a) | Reshape(a)
            | Transpose(a) | MeanChannels(a) => vec![*a],
            Concat(parts) | ConcatBatch(parts) => parts.clone(),
            SliceChannels { x, .. }
            | IndexBatch { x, .. }
            | SliceBatch { x, .. }
            | Upsample { x, .. }
            | MaxPool2 { x, .. }
            | AvgPool { x, .. }
            | MinMaxNorm { x, .. } => vec![*x],
            JointHistogram { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            ChannelBias { x, b } => vec![*x, *b],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Warp { img, field } => vec![*img, *field],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Arena holding one forward pass.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`, or `None` if `var` does not
    /// influence the loss or was created as a constant.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.id], g.clone()))
    }

    /// Like [`Gradients::get`] but returns zeros for unreached variables.
    pub fn get_or_zero(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let [n, _, h, w] = values[0].dims4();
        let mut total_c = 0;
        for v in &values {
            let [vn, vc, vh, vw] = v.dims4();
            assert_eq!((vn, vh, vw), (n, h, w), "concat: mismatched shapes");
            total_c += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        self.push(
            Tensor::new(&[n, total_c, h, w], data),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Concatenate tensors along the batch axis.
    pub fn concat_batch<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat_batch: mismatched shapes");
            n += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tail);
        self.push(
            Tensor::new(&shape, data),
            Op::ConcatBatch(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let count = loss.id + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..count).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // Constants never expose gradients.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Gradients { grads, shapes }
    }
}

fn wants<T>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn acc<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]);
    f(slot);
}

fn acc_map<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    g: &[T],
    f: impl Fn(usize, T) -> T,
) {
    acc(nodes, grads, id, |dst| {
        for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
            *d = *d + f(i, gi);
        }
    });
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = node.value.data();
    let val = |id: usize| nodes[id].value.data();
    let one = T::one();
    let zero = T::zero();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_map(nodes, grads, *a, g, |_, gi| gi);
            acc_map(nodes, grads, *b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            acc_map(nodes, grads, *a, g, |_, gi| gi);
            acc_map(nodes, grads, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, g, |i, gi| gi * vb[i]);
            acc_map(nodes, grads, *b, g, |i, gi| gi * va[i]);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, g, |i, gi| gi / vb[i]);
            acc_map(nodes, grads, *b, g, |i, gi| -gi * va[i] / (vb[i] * vb[i]));
        }
        Op::Scale(a, s) => acc_map(nodes, grads, *a, g, |_, gi| gi * *s),
        Op::AddScalar(a) | Op::Reshape(a) => acc_map(nodes, grads, *a, g, |_, gi| gi),
        Op::ScaleBy(x, s) => {
            let (vx, vs) = (val(*x), val(*s)[0]);
            acc_map(nodes, grads, *x, g, |_, gi| gi * vs);
            if wants(nodes, *s) {
                let total: T = g.iter().zip(vx).map(|(&gi, &xi)| gi * xi).sum();
                acc(nodes, grads, *s, |d| d[0] = d[0] + total);
            }
        }
        Op::Element(x, i) => acc(nodes, grads, *x, |d| d[*i] = d[*i] + g[0]),
        Op::Relu(a) => {
            let va = val(*a);
            acc_map(nodes, grads, *a, g, |i, gi| if va[i] > zero { gi } else { zero });
        }
        Op::LeakyRelu(a, slope) => {
            let va = val(*a);
            acc_map(nodes, grads, *a, g, |i, gi| if va[i] > zero { gi } else { gi * *slope });
        }
        Op::Tanh(a) => acc_map(nodes, grads, *a, g, |i, gi| gi * (one - y[i] * y[i])),
        Op::Sigmoid(a) => acc_map(nodes, grads, *a, g, |i, gi| gi * y[i] * (one - y[i])),
        Op::Log(a) => {
            let va = val(*a);
            acc_map(nodes, grads, *a, g, |i, gi| gi / va[i]);
        }
        Op::Exp(a) => acc_map(nodes, grads, *a, g, |i, gi| gi * y[i]),
        Op::Abs(a) => {
            let va = val(*a);
            acc_map(nodes, grads, *a, g, |i, gi| {
                if va[i] > zero {
                    gi
                } else if va[i] < zero {
                    -gi
                } else {
                    zero
                }
            });
        }
        Op::Square(a) => {
            let va = val(*a);
            let two = T::lit(2.0);
            acc_map(nodes, grads, *a, g, |i, gi| two * va[i] * gi);
        }
        Op::Clamp(a, lo, hi) => {
            let va = val(*a);
            acc_map(nodes, grads, *a, g, |i, gi| {
                if va[i] >= *lo && va[i] <= *hi {
                    gi
                } else {
                    zero
                }
            });
        }
        Op::Sum(a) => acc_map(nodes, grads, *a, &vec![g[0]; nodes[*a].value.numel()], |_, gi| gi),
        Op::SumPerSample(a) => {
            let n = g.len();
            let per = nodes[*a].value.numel() / n;
            acc(nodes, grads, *a, |d| {
                for (i, v) in d.iter_mut().enumerate() {
                    *v = *v + g[i / per];
                }
            });
        }
        Op::ConcatBatch(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                acc_map(nodes, grads, p, &g[offset..offset + len], |_, gi| gi);
                offset += len;
            }
        }
        Op::SliceBatch { x, start } => {
            let per = node.value.numel() / node.value.shape()[0];
            acc(nodes, grads, *x, |d| {
                for (a, &b) in d[start * per..].iter_mut().zip(g) {
                    *a = *a + b;
                }
            });
        }
        Op::Concat(parts) => {
            let [n, total_c, h, w] = node.value.dims4();
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.shape()[1];
                acc(nodes, grads, p, |d| {
                    for s in 0..n {
                        let src = &g[(s * total_c + offset) * plane..(s * total_c + offset + c) * plane];
                        let dst = &mut d[s * c * plane..(s + 1) * c * plane];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                });
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            let [n, c_in, h, w] = nodes[*x].value.dims4();
            let c = node.value.shape()[1];
            let plane = h * w;
            acc(nodes, grads, *x, |d| {
                for s in 0..n {
                    let dst = &mut d[(s * c_in + start) * plane..(s * c_in + start + c) * plane];
                    for (a, &b) in dst.iter_mut().zip(&g[s * c * plane..(s + 1) * c * plane]) {
                        *a = *a + b;
                    }
                }
            });
        }
        Op::IndexBatch { x, index } => {
            let per = g.len();
            acc(nodes, grads, *x, |d| {
                for (a, &b) in d[index * per..(index + 1) * per].iter_mut().zip(g) {
                    *a = *a + b;
                }
            });
        }
        Op::Conv2d { x, w, geom } => {
            let vx = val(*x);
            let vw = val(*w);
            let n = nodes[*x].value.shape()[0];
            let co = nodes[*w].value.shape()[0];
            let (gx, gw) = conv2d_backward(vx, n, geom, vw, co, g, wants(nodes, *x), wants(nodes, *w));
            if let Some(gx) = gx {
                acc_map(nodes, grads, *x, &gx, |_, v| v);
            }
            if let Some(gw) = gw {
                acc_map(nodes, grads, *w, &gw, |_, v| v);
            }
        }
        Op::ChannelBias { x, b } => {
            acc_map(nodes, grads, *x, g, |_, gi| gi);
            if wants(nodes, *b) {
                let [n, c, h, w] = node.value.dims4();
                let plane = h * w;
                acc(nodes, grads, *b, |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let start = (s * c + ch) * plane;
                            d[ch] = d[ch] + g[start..start + plane].iter().copied().sum::<T>();
                        }
                    }
                });
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let [n, c, h, w] = node.value.dims4();
            let plane = h * w;
            let m = T::from_usize(n * plane).unwrap();
            let vg = val(*gamma);
            let mut sum_g = vec![zero; c];
            let mut sum_gx = vec![zero; c];
            for s in 0..n {
                for ch in 0..c {
                    let start = (s * c + ch) * plane;
                    for i in start..start + plane {
                        sum_g[ch] = sum_g[ch] + g[i];
                        sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                    }
                }
            }
            acc(nodes, grads, *gamma, |d| {
                for ch in 0..c {
                    d[ch] = d[ch] + sum_gx[ch];
                }
            });
            acc(nodes, grads, *beta, |d| {
                for ch in 0..c {
                    d[ch] = d[ch] + sum_g[ch];
                }
            });
            acc(nodes, grads, *x, |d| {
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * plane;
                        let k = vg[ch] * inv_std[ch];
                        for i in start..start + plane {
                            let gi = if *train {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                            d[i] = d[i] + gi;
                        }
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                // d += g * b^T
                T::gemm(m, n, k, one, g, n as isize, 1, vb, 1, n as isize, one, d, k as isize, 1);
            });
            acc(nodes, grads, *b, |d| {
                // d += a^T * g
                T::gemm(k, m, n, one, va, 1, k as isize, g, n as isize, 1, one, d, n as isize, 1);
            });
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let (rows, cols) = (s[0], s[1]);
            acc(nodes, grads, *a, |d| {
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] = d[j * rows + i] + g[i * cols + j];
                    }
                }
            });
        }
        Op::RowBias(a, b) => {
            acc_map(nodes, grads, *a, g, |_, gi| gi);
            let cols = node.value.shape()[1];
            acc(nodes, grads, *b, |d| {
                for (i, &gi) in g.iter().enumerate() {
                    d[i % cols] = d[i % cols] + gi;
                }
            });
        }
        Op::Upsample { x, factor } => {
            let [n, c, h, w] = nodes[*x].value.dims4();
            let f = *factor;
            let wo = w * f;
            acc(nodes, grads, *x, |d| {
                for nc in 0..n * c {
                    for yo in 0..h * f {
                        for xo in 0..wo {
                            let di = nc * h * w + (yo / f) * w + xo / f;
                            d[di] = d[di] + g[nc * h * f * wo + yo * wo + xo];
                        }
                    }
                }
            });
        }
        Op::MaxPool2 { x, argmax } => {
            acc(nodes, grads, *x, |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] = d[src] + g[o];
                }
            });
        }
        Op::AvgPool { x, kernel, stride } => {
            let [n, c, h, w] = nodes[*x].value.dims4();
            let [_, _, ho, wo] = node.value.dims4();
            let scale = one / T::from_usize(kernel * kernel).unwrap();
            acc(nodes, grads, *x, |d| {
                for nc in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gi = g[(nc * ho + oy) * wo + ox] * scale;
                            for ky in 0..*kernel {
                                let row = (nc * h + oy * stride + ky) * w + ox * stride;
                                for v in &mut d[row..row + kernel] {
                                    *v = *v + gi;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::MinMaxNorm { x, argmin, argmax, range } => {
            let [n, c, h, w] = nodes[*x].value.dims4();
            let plane = h * w;
            let vx = val(*x);
            acc(nodes, grads, *x, |d| {
                for m in 0..n * c {
                    let r = range[m];
                    if r <= zero {
                        continue;
                    }
                    let start = m * plane;
                    let lo = vx[argmin[m]];
                    let hi = vx[argmax[m]];
                    let mut to_lo = zero;
                    let mut to_hi = zero;
                    for i in start..start + plane {
                        d[i] = d[i] + g[i] / r;
                        to_lo = to_lo + g[i] * (vx[i] - hi);
                        to_hi = to_hi - g[i] * (vx[i] - lo);
                    }
                    d[argmin[m]] = d[argmin[m]] + to_lo / (r * r);
                    d[argmax[m]] = d[argmax[m]] + to_hi / (r * r);
                }
            });
        }
        Op::MeanChannels(x) => {
            let [n, c, h, w] = nodes[*x].value.dims4();
            let plane = h * w;
            let inv = one / T::from_usize(c).unwrap();
            acc(nodes, grads, *x, |d| {
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..plane {
                            let di = (s * c + ch) * plane + i;
                            d[di] = d[di] + g[s * plane + i] * inv;
                        }
                    }
                }
            });
        }
        Op::Warp { img, field } => {
            let [n, c, h, w] = nodes[*img].value.dims4();
            let plane = h * w;
            let vi = val(*img);
            let vf = val(*field);
            let mut gi = wants(nodes, *img).then(|| vec![zero; n * c * plane]);
            let mut gf = wants(nodes, *field).then(|| vec![zero; n * 2 * plane]);
            for s in 0..n {
                let f = &vf[s * 2 * plane..(s + 1) * 2 * plane];
                let (dr, dc) = f.split_at(plane);
                for ch in 0..c {
                    let off = (s * c + ch) * plane;
                    let gimg = gi.as_mut().map(|v| &mut v[off..off + plane]);
                    let gfield = gf.as_mut().map(|v| {
                        let (a, b) = v[s * 2 * plane..(s + 1) * 2 * plane].split_at_mut(plane);
                        (a, b)
                    });
                    warp_bilinear_plane_backward(&vi[off..off + plane], h, w, dr, dc, &g[off..off + plane], gimg, gfield);
                }
            }
            if let Some(gi) = gi {
                acc_map(nodes, grads, *img, &gi, |_, v| v);
            }
            if let Some(gf) = gf {
                acc_map(nodes, grads, *field, &gf, |_, v| v);
            }
        }
        Op::JointHistogram { a, b, bins } => {
            let (va, vb) = (val(*a), val(*b));
            let scale = T::from_usize(bins - 1).unwrap() / T::from_usize(va.len()).unwrap();
            let mut da = vec![zero; va.len()];
            let mut db = vec![zero; va.len()];
            for p in 0..va.len() {
                let (i, al, ia) = hist_split(va[p], *bins);
                let (j, be, ib) = hist_split(vb[p], *bins);
                let at = |r: usize, c: usize| g[r * bins + c];
                // Each cell mass is linear in (al, be) on either side of al = be.
                let (ga, gb) = if al > be {
                    (at(i + 1, j) - at(i, j), at(i + 1, j + 1) - at(i + 1, j))
                } else {
                    (at(i + 1, j + 1) - at(i, j + 1), at(i, j + 1) - at(i, j))
                };
                if ia {
                    da[p] = ga * scale;
                }
                if ib {
                    db[p] = gb * scale;
                }
            }
            acc_map(nodes, grads, *a, &da, |_, v| v);
            acc_map(nodes, grads, *b, &db, |_, v| v);
        }
    }
}

macro_rules! unary {
    ($name:ident, $variant:ident, $f:expr) => {
        pub fn $name(self) -> Self {
            let v = self.value();
            let f = $f;
            let out = v.map(f);
            self.graph.push(out, Op::$variant(self.id))
        }
    };
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Self {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    fn binary(self, other: Self, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.graph.push(Tensor::new(a.shape(), data), op(self.id, other.id))
    }

    pub fn scale(self, s: T) -> Self {
        let out = self.value().map(|x| x * s);
        self.graph.push(out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Self {
        let out = self.value().map(|x| x + s);
        self.graph.push(out, Op::AddScalar(self.id))
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Self {
        self.scale(-T::one()).add_scalar(T::one())
    }

    /// Multiply every element by a single-element variable.
    pub fn scale_by(self, s: Self) -> Self {
        let sv = s.value();
        assert_eq!(sv.numel(), 1, "scale_by expects a scalar");
        let k = sv.item();
        let out = self.value().map(|x| x * k);
        self.graph.push(out, Op::ScaleBy(self.id, s.id))
    }

    /// Single element `i` of the flattened tensor, as shape `[1]`.
    pub fn element(self, i: usize) -> Self {
        let v = self.value().data()[i];
        self.graph.push(Tensor::scalar(v), Op::Element(self.id, i))
    }

    unary!(relu, Relu, |x: T| x.max(T::zero()));
    unary!(tanh, Tanh, |x: T| x.tanh());
    unary!(sigmoid, Sigmoid, |x: T| T::one() / (T::one() + (-x).exp()));
    unary!(log, Log, |x: T| x.ln());
    unary!(exp, Exp, |x: T| x.exp());
    unary!(abs, Abs, |x: T| x.abs());
    unary!(square, Square, |x: T| x * x);

    pub fn leaky_relu(self, slope: T) -> Self {
        let out = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.graph.push(out, Op::LeakyRelu(self.id, slope))
    }

    pub fn clamp(self, lo: T, hi: T) -> Self {
        let out = self.value().map(|x| x.max(lo).min(hi));
        self.graph.push(out, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Self {
        let total: T = self.value().data().iter().copied().sum();
        self.graph.push(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sum over all but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(self) -> Self {
        let v = self.value();
        let n = v.shape()[0];
        let per = v.numel() / n;
        let data = (0..n).map(|s| v.data()[s * per..(s + 1) * per].iter().copied().sum()).collect();
        self.graph.push(Tensor::new(&[n], data), Op::SumPerSample(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshaped(shape);
        self.graph.push(v, Op::Reshape(self.id))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Self {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        assert!(start + len <= c);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            data.extend_from_slice(&v.data()[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        self.graph
            .push(Tensor::new(&[n, len, h, w], data), Op::SliceChannels { x: self.id, start })
    }

    /// Sample `index` of the leading axis, keeping a unit leading axis.
    /// Samples `start .. start + len` of the batch.
    pub fn slice_batch(self, start: usize, len: usize) -> Self {
        let v = self.value();
        let n = v.shape()[0];
        assert!(len > 0 && start + len <= n);
        let per = v.numel() / n;
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * per..(start + len) * per].to_vec();
        self.graph
            .push(Tensor::new(&shape, data), Op::SliceBatch { x: self.id, start })
    }

    pub fn index_batch(self, index: usize) -> Self {
        let v = self.value();
        let n = v.shape()[0];
        assert!(index < n);
        let per = v.numel() / n;
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        let data = v.data()[index * per..(index + 1) * per].to_vec();
        self.graph
            .push(Tensor::new(&shape, data), Op::IndexBatch { x: self.id, index })
    }

    /// 2D convolution with square kernel `[Co, C, k, k]` and zero padding.
    pub fn conv2d(self, weight: Self, stride: usize, pad: usize) -> Self {
        let (x, wt) = (self.value(), weight.value());
        let [n, c, h, w] = x.dims4();
        let [co, ci, k, k2] = wt.dims4();
        assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, got {c}");
        assert_eq!(k, k2);
        let geom = ConvGeom { channels: c, height: h, width: w, kernel: k, stride, pad };
        let out = conv2d_forward(x.data(), n, &geom, wt.data(), co);
        let shape = [n, co, geom.out_height(), geom.out_width()];
        self.graph.push(
            Tensor::new(&shape, out),
            Op::Conv2d { x: self.id, w: weight.id, geom },
        )
    }

    pub fn add_channel_bias(self, bias: Self) -> Self {
        let (x, b) = (self.value(), bias.value());
        let [n, c, h, w] = x.dims4();
        assert_eq!(b.numel(), c);
        let plane = h * w;
        let mut data = x.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                for v in &mut data[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                    *v = *v + b.data()[ch];
                }
            }
        }
        self.graph
            .push(Tensor::new(x.shape(), data), Op::ChannelBias { x: self.id, b: bias.id })
    }

    /// Batch normalization over `(N, H, W)` per channel.
    pub fn batch_norm(self, gamma: Self, beta: Self, mode: &BnMode<T>) -> (Self, BnStats<T>) {
        let x = self.value();
        let [n, c, h, w] = x.dims4();
        let plane = h * w;
        let m = T::from_usize(n * plane).unwrap();
        let (gv, bv) = (gamma.value(), beta.value());
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s1 = T::zero();
                    for s in 0..n {
                        s1 = s1 + x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    let mu = s1 / m;
                    let mut s2 = T::zero();
                    for s in 0..n {
                        for &v in &x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                            s2 = s2 + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = s2 / m;
                }
                (mean, var, *eps, true)
            }
            BnMode::Eval { mean, var, eps } => (mean.clone(), var.clone(), *eps, false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * plane;
                for i in start..start + plane {
                    xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let stats = BnStats { mean, var };
        let y = self.graph.push(
            Tensor::new(x.shape(), out),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train },
        );
        (y, stats)
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        self.graph.push(Tensor::new(&[m, n], out), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Self {
        let v = self.value();
        let s = v.shape();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        self.graph.push(Tensor::new(&[c, r], out), Op::Transpose(self.id))
    }

    /// `[M, N] + b[N]` broadcast over rows.
    pub fn add_row_bias(self, bias: Self) -> Self {
        let (a, b) = (self.value(), bias.value());
        let cols = a.shape()[1];
        assert_eq!(b.numel(), cols);
        let data = a.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % cols]).collect();
        self.graph
            .push(Tensor::new(a.shape(), data), Op::RowBias(self.id, bias.id))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Self {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for yo in 0..ho {
                for xo in 0..wo {
                    out[(nc * ho + yo) * wo + xo] = v.data()[(nc * h + yo / factor) * w + xo / factor];
                }
            }
        }
        self.graph
            .push(Tensor::new(&[n, c, ho, wo], out), Op::Upsample { x: self.id, factor })
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(self) -> Self {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (nc * h + 2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (nc * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if v.data()[idx] > v.data()[best] {
                            best = idx;
                        }
                    }
                    let o = (nc * ho + oy) * wo + ox;
                    out[o] = v.data()[best];
                    argmax[o] = best;
                }
            }
        }
        self.graph
            .push(Tensor::new(&[n, c, ho, wo], out), Op::MaxPool2 { x: self.id, argmax })
    }

    /// Mean over `kernel x kernel` windows placed every `stride` pixels (no padding).
    pub fn avg_pool(self, kernel: usize, stride: usize) -> Self {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        assert!(h >= kernel && w >= kernel);
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let inv = T::one() / T::from_usize(kernel * kernel).unwrap();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        let row = (nc * h + oy * stride + ky) * w + ox * stride;
                        for &x in &v.data()[row..row + kernel] {
                            acc = acc + x;
                        }
                    }
                    out[(nc * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        self.graph.push(
            Tensor::new(&[n, c, ho, wo], out),
            Op::AvgPool { x: self.id, kernel, stride },
        )
    }

    /// Per-map min-max normalization to `[0, 1]`; constant maps become zeros.
    pub fn min_max_normalize(self) -> Self {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let plane = h * w;
        let mut out = vec![T::zero(); v.numel()];
        let mut argmin = vec![0; n * c];
        let mut argmax = vec![0; n * c];
        let mut range = vec![T::zero(); n * c];
        for m in 0..n * c {
            let start = m * plane;
            let (mut lo, mut hi) = (start, start);
            for i in start..start + plane {
                if v.data()[i] < v.data()[lo] {
                    lo = i;
                }
                if v.data()[i] > v.data()[hi] {
                    hi = i;
                }
            }
            let r = v.data()[hi] - v.data()[lo];
            argmin[m] = lo;
            argmax[m] = hi;
            if r > T::zero() {
                range[m] = r;
                for i in start..start + plane {
                    out[i] = (v.data()[i] - v.data()[lo]) / r;
                }
            }
        }
        self.graph.push(
            Tensor::new(v.shape(), out),
            Op::MinMaxNorm { x: self.id, argmin, argmax, range },
        )
    }

    /// Mean over the channel axis: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn mean_channels(self) -> Self {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let plane = h * w;
        let inv = T::one() / T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); n * plane];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..plane {
                    out[s * plane + i] = out[s * plane + i] + v.data()[(s * c + ch) * plane + i];
                }
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        self.graph
            .push(Tensor::new(&[n, 1, h, w], out), Op::MeanChannels(self.id))
    }

    /// Backward-warp `[N, C, H, W]` by a `[N, 2, H, W]` displacement field
    /// (channel 0 rows, channel 1 columns) with bilinear interpolation.
    pub fn warp(self, field: Self) -> Self {
        let (img, f) = (self.value(), field.value());
        let [n, c, h, w] = img.dims4();
        assert_eq!(f.dims4(), [n, 2, h, w], "warp: field shape mismatch");
        let plane = h * w;
        let mut out = vec![T::zero(); img.numel()];
        for s in 0..n {
            let fs = &f.data()[s * 2 * plane..(s + 1) * 2 * plane];
            let (dr, dc) = fs.split_at(plane);
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                warp_bilinear_plane(&img.data()[off..off + plane], h, w, dr, dc, &mut out[off..off + plane]);
            }
        }
        self.graph
            .push(Tensor::new(img.shape(), out), Op::Warp { img: self.id, field: field.id })
    }

    /// Normalized `bins x bins` joint histogram of two equally sized
    /// tensors with values in `[0, 1]`.
    ///
    /// Each value spreads over its two nearest bin centres `k / (bins - 1)`
    /// with triangular weights, so the marginals are triangular Parzen
    /// histograms. A value pair is coupled monotonically: its two weight
    /// vectors are matched by cumulative mass rather than multiplied, so
    /// identical inputs give a diagonal histogram.
    pub fn joint_histogram(self, other: Self, bins: usize) -> Self {
        assert!(bins >= 2);
        let (va, vb) = (self.value(), other.value());
        assert_eq!(va.numel(), vb.numel(), "joint_histogram: size mismatch");
        let n = T::from_usize(va.numel()).unwrap();
        let mut out = vec![T::zero(); bins * bins];
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let (i, al, _) = hist_split(x, bins);
            let (j, be, _) = hist_split(y, bins);
            let one = T::one();
            if al > be {
                out[i * bins + j] = out[i * bins + j] + (one - al);
                out[(i + 1) * bins + j] = out[(i + 1) * bins + j] + (al - be);
            } else {
                out[i * bins + j] = out[i * bins + j] + (one - be);
                out[i * bins + j + 1] = out[i * bins + j + 1] + (be - al);
            }
            out[(i + 1) * bins + j + 1] = out[(i + 1) * bins + j + 1] + al.min(be);
        }
        for v in &mut out {
            *v = *v / n;
        }
        self.graph.push(
            Tensor::new(&[bins, bins], out),
            Op::JointHistogram { a: self.id, b: other.id, bins },
        )
    }
}

impl<'g, T: Real> std::ops::Add for Var<'g, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a + b, Op::Add)
    }
}

impl<'g, T: Real> std::ops::Sub for Var<'g, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a - b, Op::Sub)
    }
}

impl<'g, T: Real> std::ops::Mul for Var<'g, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a * b, Op::Mul)
    }
}

impl<'g, T: Real> std::ops::Div for Var<'g, T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self.binary(rhs, |a, b| a / b, Op::Div)
    }
}

impl<'g, T: Real> std::ops::Neg for Var<'g, T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

/// Lower bin, fractional offset towards the next bin, and whether the value
/// lies inside `[0, 1]` (outside it the position is clamped and constant).
fn hist_split<T: Real>(x: T, bins: usize) -> (usize, T, bool) {
    let top = T::from_usize(bins - 1).unwrap();
    let u = x * top;
    let inside = u >= T::zero() && u <= top;
    let u = u.max(T::zero()).min(top);
    let i = u.floor().to_usize().unwrap().min(bins - 2);
    (i, u - T::from_usize(i).unwrap(), inside)
}
