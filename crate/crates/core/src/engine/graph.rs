//! Tape-based reverse-mode differentiation over [`Tensor`] values.

use super::conv::{conv2d_backward, conv2d_forward};
use super::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: T, hi: T },
    Affine { x: Var, scale: T },
    MulConst { x: Var, factor: Tensor<T> },
    LinComb(Vec<(Var, T)>),
    Concat(Vec<Var>),
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var, k: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Select { x: Var, keep: Vec<bool> },
    ChannelMean(Var),
    Mean(Var),
    L1 { a: Var, b: Var, mean: bool },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Vec<u8> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations so gradients can be pulled back from a scalar loss.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives a gradient (a trainable parameter or a probe).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(value, Op::Conv { x, w, b, stride, pad }, ng)
    }

    /// Per-sample, per-channel standardization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let m = T::from(xv.plane_len()).unwrap();
        let eps = T::lit(NORM_EPS);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                let plane = out.plane_mut(s, ch);
                let mean = plane.iter().copied().sum::<T>() / m;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let is = T::one() / (var + eps).sqrt();
                for v in plane.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine { x, scale }, ng)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), factor.shape(), "mul_const operands differ in shape");
        let data = xv.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(out, Op::MulConst { x, factor: factor.clone() }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lincomb(&[(a, T::one()), (b, T::one())])
    }

    /// Weighted sum of equally shaped values.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0);
        let mut out = Tensor::zeros(shape);
        for &(v, w) in terms {
            let t = self.value(v);
            assert_eq!(t.shape(), shape, "lincomb operands differ in shape");
            for (o, &x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(out, Op::LinComb(terms.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&vals);
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(h % k == 0 && w % k == 0, "avg_pool({k}) on {h}x{w}");
        let (ho, wo) = (h / k, w / k);
        let norm = T::one() / T::from(k * k).unwrap();
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..h {
                    for xx in 0..w {
                        dst[(y / k) * wo + xx / k] += src[y * w + xx];
                    }
                }
                for v in dst.iter_mut() {
                    *v *= norm;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::AvgPool { x, k }, ng)
    }

    /// Global average pool down to `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.shape(x);
        assert_eq!(h, w, "global pooling expects square maps");
        self.avg_pool(x, h)
    }

    /// 2 x 2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 on {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(out.len());
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let base = (s * c + ch) * h * w;
                let dst = out.plane_mut(s, ch);
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = (2 * y + dy) * w + 2 * xx + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        dst[y * wo + xx] = src[best];
                        argmax.push(base + best);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool { x, argmax }, ng)
    }

    /// Take `x` where `keep` is set and the constant `other` elsewhere.
    pub fn select(&mut self, keep: &[bool], x: Var, other: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), other.shape(), "select operands differ in shape");
        assert_eq!(keep.len(), xv.len());
        let data = keep
            .iter()
            .zip(xv.data().iter().zip(other.data()))
            .map(|(&k, (&a, &b))| if k { a } else { b })
            .collect();
        let out = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(out, Op::Select { x, keep: keep.to_vec() }, ng)
    }

    /// Average over channels to a single plane.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let norm = T::one() / T::from(c).unwrap();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch).to_vec();
                for (o, v) in out.plane_mut(s, 0).iter_mut().zip(src) {
                    *o += v * norm;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ChannelMean(x), ng)
    }

    /// Mean over every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from(xv.len()).unwrap());
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Absolute-difference loss, summed or averaged over all elements.
    pub fn l1(&mut self, a: Var, b: Var, mean: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1 operands differ in shape");
        let mut total = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        if mean {
            total = total / T::from(av.len()).unwrap();
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(total), Op::L1 { a, b, mean }, ng)
    }

    /// Pixelwise softmax over channels followed by mean cross-entropy against
    /// integer labels laid out as `[N, H, W]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let lv = self.value(logits);
        let [n, c, h, w] = lv.shape();
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "label map size mismatch");
        let probs = softmax_channels(lv);
        let mut total = T::zero();
        for s in 0..n {
            for p in 0..hw {
                let l = labels[s * hw + p] as usize;
                assert!(l < c, "label {l} out of range for {c} classes");
                let prob = probs[(s * c + l) * hw + p];
                total -= prob.max(T::min_positive_value()).ln();
            }
        }
        let out = Tensor::scalar(total / T::from(n * hw).unwrap());
        let ng = self.ng(logits);
        self.push(out, Op::SoftmaxCe { logits, probs, labels: labels.to_vec() }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.pull_back(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn pull_back(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let need = (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b)));
                let g = conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, dy, need);
                if let Some(dx) = g.dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = g.dw {
                    acc(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (g.db, b) {
                    acc(grads, *b, db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if !self.ng(*x) {
                    return;
                }
                let [n, c, _, _] = y.shape();
                let m = T::from(y.plane_len()).unwrap();
                let mut dx = Tensor::zeros(y.shape());
                for s in 0..n {
                    for ch in 0..c {
                        let (yp, gp) = (y.plane(s, ch), dy.plane(s, ch));
                        let sum_g: T = gp.iter().copied().sum();
                        let sum_gy: T = gp.iter().zip(yp).map(|(&g, &v)| g * v).sum();
                        let is = inv_std[s * c + ch];
                        for ((o, &g), &v) in dx.plane_mut(s, ch).iter_mut().zip(gp).zip(yp) {
                            *o = is / m * (m * g - sum_g - v * sum_gy);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let data = dy.data().iter().zip(y.data()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() });
                acc(grads, *x, Tensor::from_vec(y.shape(), data.collect()));
            }
            Op::Sigmoid(x) => {
                let data = dy.data().iter().zip(y.data()).map(|(&g, &v)| g * v * (T::one() - v));
                acc(grads, *x, Tensor::from_vec(y.shape(), data.collect()));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { T::zero() });
                acc(grads, *x, Tensor::from_vec(y.shape(), data.collect()));
            }
            Op::Affine { x, scale } => acc(grads, *x, dy.map(|g| g * *scale)),
            Op::MulConst { x, factor } => {
                let data = dy.data().iter().zip(factor.data()).map(|(&g, &f)| g * f).collect();
                acc(grads, *x, Tensor::from_vec(y.shape(), data));
            }
            Op::LinComb(terms) => {
                for &(v, w) in terms {
                    if self.ng(v) {
                        acc(grads, v, dy.map(|g| g * w));
                    }
                }
            }
            Op::Concat(parts) => {
                let [n, _, h, w] = y.shape();
                let mut offset = 0;
                for &v in parts {
                    let c = self.shape(v)[1];
                    if self.ng(v) {
                        let mut g = Tensor::zeros([n, c, h, w]);
                        for s in 0..n {
                            for ch in 0..c {
                                g.plane_mut(s, ch).copy_from_slice(dy.plane(s, offset + ch));
                            }
                        }
                        acc(grads, v, g);
                    }
                    offset += c;
                }
            }
            Op::Upsample { x, factor } => {
                let xs = self.shape(*x);
                let [n, c, _, w] = xs;
                let wo = w * factor;
                let mut g = Tensor::zeros(xs);
                for s in 0..n {
                    for ch in 0..c {
                        let src = dy.plane(s, ch);
                        let dst = g.plane_mut(s, ch);
                        for (i, &v) in src.iter().enumerate() {
                            dst[(i / wo / factor) * w + (i % wo) / factor] += v;
                        }
                    }
                }
                acc(grads, *x, g);
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let [n, c, h, w] = xs;
                let wo = w / k;
                let norm = T::one() / T::from(k * k).unwrap();
                let mut g = Tensor::zeros(xs);
                for s in 0..n {
                    for ch in 0..c {
                        let src = dy.plane(s, ch);
                        let dst = g.plane_mut(s, ch);
                        for yy in 0..h {
                            for xx in 0..w {
                                dst[yy * w + xx] = src[(yy / k) * wo + xx / k] * norm;
                            }
                        }
                    }
                }
                acc(grads, *x, g);
            }
            Op::MaxPool { x, argmax } => {
                let mut g = Tensor::zeros(self.shape(*x));
                for (&src, &v) in argmax.iter().zip(dy.data()) {
                    g.data_mut()[src] += v;
                }
                acc(grads, *x, g);
            }
            Op::Select { x, keep } => {
                let data = dy.data().iter().zip(keep).map(|(&g, &k)| if k { g } else { T::zero() });
                acc(grads, *x, Tensor::from_vec(y.shape(), data.collect()));
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(*x);
                let [n, c, _, _] = xs;
                let norm = T::one() / T::from(c).unwrap();
                let mut g = Tensor::zeros(xs);
                for s in 0..n {
                    let src = dy.plane(s, 0).to_vec();
                    for ch in 0..c {
                        for (o, &v) in g.plane_mut(s, ch).iter_mut().zip(&src) {
                            *o = v * norm;
                        }
                    }
                }
                acc(grads, *x, g);
            }
            Op::Mean(x) => {
                let xs = self.shape(*x);
                let len = T::from(xs.iter().product::<usize>()).unwrap();
                acc(grads, *x, Tensor::full(xs, dy.item() / len));
            }
            Op::L1 { a, b, mean } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut scale = dy.item();
                if *mean {
                    scale = scale / T::from(av.len()).unwrap();
                }
                let sign: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| {
                        if p > q {
                            scale
                        } else if p < q {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let ga = Tensor::from_vec(av.shape(), sign);
                if self.ng(*b) {
                    acc(grads, *b, ga.map(|v| -v));
                }
                if self.ng(*a) {
                    acc(grads, *a, ga);
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let shape = self.shape(*logits);
                let [n, c, h, w] = shape;
                let hw = h * w;
                let scale = dy.item() / T::from(n * hw).unwrap();
                let mut g = probs.clone();
                for s in 0..n {
                    for p in 0..hw {
                        let l = labels[s * hw + p] as usize;
                        g[(s * c + l) * hw + p] -= T::one();
                    }
                }
                for v in g.iter_mut() {
                    *v *= scale;
                }
                acc(grads, *logits, Tensor::from_vec(shape, g));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Channel softmax, returned in the same NCHW layout.
pub(crate) fn softmax_channels<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut out = t.data().to_vec();
    for s in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (s * c + ch) * hw + p;
            let max = (0..c).map(|ch| out[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (out[idx(ch)] - max).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] = out[idx(ch)] / z;
            }
        }
    }
    out
}
