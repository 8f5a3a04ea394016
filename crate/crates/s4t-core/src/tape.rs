//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Tape` is a define-by-run graph: each op appends a node holding its
//! output tensor and enough saved state to run its backward rule. Nodes are
//! addressed by plain `NodeId` indices, so the graph is rebuilt from scratch
//! every forward pass and dropped afterwards.
//!
//! Numeric policy: tensors store f32, every reduction (convolution sums,
//! batch statistics, loss sums, gradient accumulation) runs in f64 and is
//! rounded once on write-out. Scalar-producing ops additionally keep their
//! unrounded f64 value (see [`Tape::scalar64`]) so loss values and
//! finite-difference checks are not limited by f32 resolution. All loops
//! accumulate in a fixed order: results are bitwise reproducible.
//!
//! Gradients flow only where `requires_grad` is set, which prunes whole
//! subgraphs: with frozen convolutions, no convolution weight gradient is
//! ever computed, and a first layer whose input and weights are both frozen
//! skips its input gradient too.

use crate::mathf;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op {
    /// Free variable or constant (no inputs).
    Leaf,
    /// Model parameter; the (pid, node) binding lives on the tape.
    Param,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized activations, saved for both weight and input grads.
        xhat: Vec<f32>,
        /// Per-channel 1/sqrt(var + eps).
        invstd: Vec<f64>,
    },
    Relu {
        input: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    /// sum over pixels of weights[px] * -ln(probs[label] + eps), / numel_px.
    WeightedNll {
        probs: NodeId,
        labels: Vec<u8>,
        weights: Vec<f32>,
        eps: f32,
    },
    /// sum over pixels of mask[px] * sum_c p * ln(p + eps), / numel_px.
    /// This is the negative entropy of the selected pixels.
    MaskedNegEntropy {
        probs: NodeId,
        mask: Vec<u8>,
        eps: f32,
    },
    /// sum over pixels of sum_c p[c] * per_class[c], / numel_px.
    MeanChannelDot {
        probs: NodeId,
        per_class: Vec<f32>,
    },
    /// sum over all elements of x * coeffs (a scalar probe for tests).
    DotConst {
        input: NodeId,
        coeffs: Vec<f32>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        k: f32,
    },
}

struct Node {
    value: Tensor,
    /// Unrounded value for scalar-producing ops.
    value64: Option<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients per node, in node order. Filled by `backward`,
    /// additively across calls.
    grads: Vec<Option<Vec<f32>>>,
    /// (pid, node) pairs recorded by `param`, for gradient gathering.
    bindings: Vec<(usize, NodeId)>,
}

fn check_finite(tag: &str, t: &Tensor) {
    if cfg!(debug_assertions) {
        assert!(t.all_finite(), "non-finite values in output of {tag}");
    }
}

/// Dot product of two f32 slices accumulated in f64, fixed order.
pub(crate) fn dot_f32_f64(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = k * 4;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0f64;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    assert_eq!(t.rank(), 4, "{what} must be rank 4, got shape {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2), t.dim(3))
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

    fn push(&mut self, value: Tensor, value64: Option<f64>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, value64, requires_grad, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, None, requires_grad, Op::Leaf)
    }

    /// Registers a model parameter. Its gradient can later be gathered by
    /// `pid` from `bindings()`.
    pub fn param(&mut self, pid: usize, value: Tensor, trainable: bool) -> NodeId {
        let id = self.push(value, None, trainable, Op::Param);
        self.bindings.push((pid, id));
        id
    }

    pub fn bindings(&self) -> &[(usize, NodeId)] {
        &self.bindings
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar node value at f64 precision (falls back to the f32 value).
    pub fn scalar64(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        match n.value64 {
            Some(v) => v,
            None => n.value.item() as f64,
        }
    }

    /// Gradient of the most recent `backward` targets w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── ops ──

    /// 2D convolution, zero padding, NCHW input, [Cout, Cin, KH, KW] weight.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let out = conv2d_forward(x, w, b, stride, padding);
        check_finite("conv2d", &out);
        let rg =
            self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        self.push(out, None, rg, Op::Conv2d { input, weight, bias, stride, padding })
    }

    /// Batch normalization over (N, H, W) per channel, always with the
    /// statistics of the current batch; `gamma`, `beta` are [C].
    pub fn batch_norm2d(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> NodeId {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x, "batch_norm2d input");
        assert!(n * h * w > 0, "batch_norm2d on batch with zero spatial extent");
        let g = self.value(gamma);
        let bt = self.value(beta);
        assert_eq!(g.numel(), c, "gamma must have {c} elements");
        assert_eq!(bt.numel(), c, "beta must have {c} elements");

        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut xhat = vec![0.0f32; x.numel()];
        let mut out = Tensor::zeros(x.shape());
        let mut invstd = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for im in 0..n {
                let base = (im * c + ch) * plane;
                for k in 0..plane {
                    sum += x.data()[base + k] as f64;
                }
            }
            let mean = sum / m;
            let mut ssq = 0.0f64;
            for im in 0..n {
                let base = (im * c + ch) * plane;
                for k in 0..plane {
                    let d = x.data()[base + k] as f64 - mean;
                    ssq += d * d;
                }
            }
            let var = ssq / m;
            let istd = 1.0 / mathf::sqrt(var + eps as f64);
            invstd[ch] = istd;
            let gv = g.data()[ch] as f64;
            let bv = bt.data()[ch] as f64;
            for im in 0..n {
                let base = (im * c + ch) * plane;
                for k in 0..plane {
                    let xh = (x.data()[base + k] as f64 - mean) * istd;
                    xhat[base + k] = xh as f32;
                    out.data_mut()[base + k] = (gv * xh + bv) as f32;
                }
            }
        }
        check_finite("batch_norm2d", &out);
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(out, None, rg, Op::BatchNorm2d { input, gamma, beta, xhat, invstd })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let mut out = x.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        check_finite("relu", &out);
        let rg = self.requires_grad(input);
        self.push(out, None, rg, Op::Relu { input })
    }

    /// Per-pixel softmax over the channel dimension of an NCHW tensor.
    pub fn softmax_channels(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x, "softmax_channels input");
        assert!(c >= 1);
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        let mut es = vec![0.0f64; c];
        for im in 0..n {
            for k in 0..plane {
                let mut mx = f32::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(x.data()[(im * c + ch) * plane + k]);
                }
                let mut sum = 0.0f64;
                for ch in 0..c {
                    let e = mathf::exp((x.data()[(im * c + ch) * plane + k] - mx) as f64);
                    es[ch] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out.data_mut()[(im * c + ch) * plane + k] = (es[ch] / sum) as f32;
                }
            }
        }
        check_finite("softmax_channels", &out);
        let rg = self.requires_grad(input);
        self.push(out, None, rg, Op::SoftmaxChannels { input })
    }

    /// Mean over all pixels of `weights * -ln(probs[label] + eps)`.
    /// Labels and weights are constants: no gradient flows through them.
    pub fn weighted_nll(
        &mut self,
        probs: NodeId,
        labels: Vec<u8>,
        weights: Vec<f32>,
        eps: f32,
    ) -> NodeId {
        let p = self.value(probs);
        let (n, c, h, w) = dims4(p, "weighted_nll probs");
        let px = n * h * w;
        assert_eq!(labels.len(), px, "labels must cover every pixel");
        assert_eq!(weights.len(), px, "weights must cover every pixel");
        let plane = h * w;
        let mut total = 0.0f64;
        for im in 0..n {
            for k in 0..plane {
                let l = labels[im * plane + k] as usize;
                assert!(l < c, "label {l} out of range for {c} classes");
                let wv = weights[im * plane + k] as f64;
                if wv != 0.0 {
                    let pv = p.data()[(im * c + l) * plane + k] as f64 + eps as f64;
                    total += wv * -mathf::ln(pv);
                }
            }
        }
        let mean = total / px as f64;
        let rg = self.requires_grad(probs);
        let out = Tensor::scalar(mean as f32);
        check_finite("weighted_nll", &out);
        self.push(out, Some(mean), rg, Op::WeightedNll { probs, labels, weights, eps })
    }

    /// Mean over all pixels of `mask * sum_c p ln(p + eps)` (negative
    /// entropy of masked pixels; minimizing it maximizes their entropy).
    pub fn masked_neg_entropy(&mut self, probs: NodeId, mask: Vec<u8>, eps: f32) -> NodeId {
        let p = self.value(probs);
        let (n, c, h, w) = dims4(p, "masked_neg_entropy probs");
        let px = n * h * w;
        assert_eq!(mask.len(), px, "mask must cover every pixel");
        let plane = h * w;
        let mut total = 0.0f64;
        for im in 0..n {
            for k in 0..plane {
                if mask[im * plane + k] == 0 {
                    continue;
                }
                for ch in 0..c {
                    let pv = p.data()[(im * c + ch) * plane + k] as f64;
                    total += pv * mathf::ln(pv + eps as f64);
                }
            }
        }
        let mean = total / px as f64;
        let rg = self.requires_grad(probs);
        let out = Tensor::scalar(mean as f32);
        check_finite("masked_neg_entropy", &out);
        self.push(out, Some(mean), rg, Op::MaskedNegEntropy { probs, mask, eps })
    }

    /// Mean over all pixels of `sum_c p[c] * per_class[c]`.
    pub fn mean_channel_dot(&mut self, probs: NodeId, per_class: Vec<f32>) -> NodeId {
        let p = self.value(probs);
        let (n, c, h, w) = dims4(p, "mean_channel_dot probs");
        assert_eq!(per_class.len(), c, "per_class must have {c} entries");
        let px = n * h * w;
        let plane = h * w;
        let mut total = 0.0f64;
        for im in 0..n {
            for ch in 0..c {
                let kc = per_class[ch] as f64;
                if kc == 0.0 {
                    continue;
                }
                let base = (im * c + ch) * plane;
                let mut s = 0.0f64;
                for k in 0..plane {
                    s += p.data()[base + k] as f64;
                }
                total += kc * s;
            }
        }
        let mean = total / px as f64;
        let rg = self.requires_grad(probs);
        let out = Tensor::scalar(mean as f32);
        check_finite("mean_channel_dot", &out);
        self.push(out, Some(mean), rg, Op::MeanChannelDot { probs, per_class })
    }

    /// Scalar probe `sum(x * coeffs)` over all elements, for gradient tests.
    pub fn dot_const(&mut self, input: NodeId, coeffs: Vec<f32>) -> NodeId {
        let x = self.value(input);
        assert_eq!(coeffs.len(), x.numel(), "coeffs must cover every element");
        let total = dot_f32_f64(x.data(), &coeffs);
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total as f32), Some(total), rg, Op::DotConst { input, coeffs })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add with mismatched shapes");
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += v;
        }
        let v64 = match (self.nodes[a.0].value64, self.nodes[b.0].value64) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        check_finite("add", &out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, v64, rg, Op::Add { a, b })
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= k;
        }
        let v64 = self.nodes[a.0].value64.map(|x| x * k as f64);
        check_finite("scale", &out);
        let rg = self.requires_grad(a);
        self.push(out, v64, rg, Op::Scale { a, k })
    }

    // ── backward ──

    /// Reverse pass from a scalar `loss` node. Visits every node at most
    /// once and adds the results into the tape's gradient store, so calling
    /// `backward` twice doubles all gradients.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        let mut local: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if local[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = local[id].take().unwrap();
            self.propagate(id, &g, &mut local);
            local[id] = Some(g);
        }
        for (slot, l) in self.grads.iter_mut().zip(local) {
            if let Some(lg) = l {
                match slot {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(lg) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(lg),
                }
            }
        }
    }

    fn add_into(local: &mut [Option<Vec<f32>>], id: NodeId, delta: Vec<f32>) {
        match &mut local[id.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(delta) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &[f32], local: &mut [Option<Vec<f32>>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let gout = Tensor::from_vec(self.nodes[id].value.shape(), g.to_vec());
                if self.nodes[input.0].requires_grad {
                    let din = conv2d_backward_input(&gout, w, x.shape(), *stride, *padding);
                    Self::add_into(local, *input, din.into_data());
                }
                if self.nodes[weight.0].requires_grad {
                    let dw = conv2d_backward_weight(&gout, x, w.shape(), *stride, *padding);
                    Self::add_into(local, *weight, dw.into_data());
                }
                if self.nodes[bias.0].requires_grad {
                    let (n, co, oh, ow) = dims4(&gout, "conv grad");
                    let mut db = vec![0.0f32; co];
                    for ch in 0..co {
                        let mut s = 0.0f64;
                        for im in 0..n {
                            let base = (im * co + ch) * oh * ow;
                            for k in 0..oh * ow {
                                s += gout.data()[base + k] as f64;
                            }
                        }
                        db[ch] = s as f32;
                    }
                    Self::add_into(local, *bias, db);
                }
            }
            Op::BatchNorm2d { input, gamma, beta, xhat, invstd } => {
                let x = &self.nodes[input.0].value;
                let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                let plane = h * w;
                let m = (n * plane) as f64;
                let gvals = self.nodes[gamma.0].value.data();
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0f32; c];
                    for ch in 0..c {
                        let mut s = 0.0f64;
                        for im in 0..n {
                            let base = (im * c + ch) * plane;
                            for k in 0..plane {
                                s += g[base + k] as f64 * xhat[base + k] as f64;
                            }
                        }
                        dg[ch] = s as f32;
                    }
                    Self::add_into(local, *gamma, dg);
                }
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![0.0f32; c];
                    for ch in 0..c {
                        let mut s = 0.0f64;
                        for im in 0..n {
                            let base = (im * c + ch) * plane;
                            for k in 0..plane {
                                s += g[base + k] as f64;
                            }
                        }
                        db[ch] = s as f32;
                    }
                    Self::add_into(local, *beta, db);
                }
                if self.nodes[input.0].requires_grad {
                    // dx = invstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)),
                    // the full derivative through the batch mean and variance.
                    let mut dx = vec![0.0f32; x.numel()];
                    for ch in 0..c {
                        let gv = gvals[ch] as f64;
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for im in 0..n {
                            let base = (im * c + ch) * plane;
                            for k in 0..plane {
                                let dxh = g[base + k] as f64 * gv;
                                s1 += dxh;
                                s2 += dxh * xhat[base + k] as f64;
                            }
                        }
                        let m1 = s1 / m;
                        let m2 = s2 / m;
                        let istd = invstd[ch];
                        for im in 0..n {
                            let base = (im * c + ch) * plane;
                            for k in 0..plane {
                                let dxh = g[base + k] as f64 * gv;
                                dx[base + k] =
                                    (istd * (dxh - m1 - xhat[base + k] as f64 * m2)) as f32;
                            }
                        }
                    }
                    Self::add_into(local, *input, dx);
                }
            }
            Op::Relu { input } => {
                if self.nodes[input.0].requires_grad {
                    let x = self.nodes[input.0].value.data();
                    let din: Vec<f32> =
                        x.iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    Self::add_into(local, *input, din);
                }
            }
            Op::SoftmaxChannels { input } => {
                if self.nodes[input.0].requires_grad {
                    let p = self.nodes[id].value.data();
                    let shape = self.nodes[id].value.shape();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let plane = h * w;
                    let mut din = vec![0.0f32; p.len()];
                    for im in 0..n {
                        for k in 0..plane {
                            let mut dot = 0.0f64;
                            for ch in 0..c {
                                let i = (im * c + ch) * plane + k;
                                dot += g[i] as f64 * p[i] as f64;
                            }
                            for ch in 0..c {
                                let i = (im * c + ch) * plane + k;
                                din[i] = (p[i] as f64 * (g[i] as f64 - dot)) as f32;
                            }
                        }
                    }
                    Self::add_into(local, *input, din);
                }
            }
            Op::WeightedNll { probs, labels, weights, eps } => {
                if self.nodes[probs.0].requires_grad {
                    let p = &self.nodes[probs.0].value;
                    let (n, c, h, w) = (p.dim(0), p.dim(1), p.dim(2), p.dim(3));
                    let plane = h * w;
                    let px = (n * plane) as f64;
                    let gs = g[0] as f64;
                    let mut din = vec![0.0f32; p.numel()];
                    for im in 0..n {
                        for k in 0..plane {
                            let wv = weights[im * plane + k] as f64;
                            if wv == 0.0 {
                                continue;
                            }
                            let l = labels[im * plane + k] as usize;
                            let i = (im * c + l) * plane + k;
                            let pv = p.data()[i] as f64 + *eps as f64;
                            din[i] = (gs * -wv / (pv * px)) as f32;
                        }
                    }
                    Self::add_into(local, *probs, din);
                }
            }
            Op::MaskedNegEntropy { probs, mask, eps } => {
                if self.nodes[probs.0].requires_grad {
                    let p = &self.nodes[probs.0].value;
                    let (n, c, h, w) = (p.dim(0), p.dim(1), p.dim(2), p.dim(3));
                    let plane = h * w;
                    let px = (n * plane) as f64;
                    let gs = g[0] as f64;
                    let mut din = vec![0.0f32; p.numel()];
                    for im in 0..n {
                        for k in 0..plane {
                            if mask[im * plane + k] == 0 {
                                continue;
                            }
                            for ch in 0..c {
                                let i = (im * c + ch) * plane + k;
                                let pv = p.data()[i] as f64;
                                let e = *eps as f64;
                                din[i] = (gs * (mathf::ln(pv + e) + pv / (pv + e)) / px) as f32;
                            }
                        }
                    }
                    Self::add_into(local, *probs, din);
                }
            }
            Op::MeanChannelDot { probs, per_class } => {
                if self.nodes[probs.0].requires_grad {
                    let p = &self.nodes[probs.0].value;
                    let (n, c, h, w) = (p.dim(0), p.dim(1), p.dim(2), p.dim(3));
                    let plane = h * w;
                    let px = (n * plane) as f64;
                    let gs = g[0] as f64;
                    let mut din = vec![0.0f32; p.numel()];
                    for im in 0..n {
                        for ch in 0..c {
                            let dv = (gs * per_class[ch] as f64 / px) as f32;
                            let base = (im * c + ch) * plane;
                            for k in 0..plane {
                                din[base + k] = dv;
                            }
                        }
                    }
                    Self::add_into(local, *probs, din);
                }
            }
            Op::DotConst { input, coeffs } => {
                if self.nodes[input.0].requires_grad {
                    let gs = g[0];
                    let din: Vec<f32> = coeffs.iter().map(|&c| c * gs).collect();
                    Self::add_into(local, *input, din);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    Self::add_into(local, *a, g.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    Self::add_into(local, *b, g.to_vec());
                }
            }
            Op::Scale { a, k } => {
                if self.nodes[a.0].requires_grad {
                    let din: Vec<f32> = g.iter().map(|&gv| gv * k).collect();
                    Self::add_into(local, *a, din);
                }
            }
        }
    }
}

// ── convolution kernels ──

/// Output spatial size of a convolution along one axis.
fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(stride >= 1, "stride must be >= 1");
    assert!(
        input + 2 * padding >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{padding}"
    );
    (input + 2 * padding - kernel) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n, cin, h, wd) = dims4(x, "conv2d input");
    let (cout, cin2, kh, kw) = dims4(w, "conv2d weight");
    assert_eq!(cin, cin2, "input has {cin} channels but weight expects {cin2}");
    assert_eq!(b.numel(), cout, "bias must have {cout} elements");
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(wd, kw, stride, padding);

    // Weights transposed to [Cin, KH, KW, Cout] so the per-tap inner loop
    // runs over contiguous output channels.
    let mut wt = vec![0.0f32; w.numel()];
    for co in 0..cout {
        for ci in 0..cin {
            for a in 0..kh {
                for q in 0..kw {
                    wt[((ci * kh + a) * kw + q) * cout + co] = w.at4(co, ci, a, q);
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let run = |im: usize, oi: usize, acc: &mut [f64], out_row: &mut [f32]| {
        for oj in 0..ow {
            for (a, &bv) in acc.iter_mut().zip(b.data()) {
                *a = bv as f64;
            }
            let i0 = (oi * stride) as isize - padding as isize;
            let j0 = (oj * stride) as isize - padding as isize;
            let a_lo = (-i0).max(0) as usize;
            let a_hi = (kh as isize).min(h as isize - i0).max(0) as usize;
            let q_lo = (-j0).max(0) as usize;
            let q_hi = (kw as isize).min(wd as isize - j0).max(0) as usize;
            for ci in 0..cin {
                for a in a_lo..a_hi {
                    let ii = (i0 + a as isize) as usize;
                    let xrow = (im * cin + ci) * h * wd + ii * wd;
                    for q in q_lo..q_hi {
                        let jj = (j0 + q as isize) as usize;
                        let xv = x.data()[xrow + jj] as f64;
                        let wrow = &wt[((ci * kh + a) * kw + q) * cout..][..cout];
                        for (acc_c, &wv) in acc.iter_mut().zip(wrow) {
                            *acc_c += xv * wv as f64;
                        }
                    }
                }
            }
            for (co, &a) in acc.iter().enumerate() {
                out_row[co * oh * ow + oj] = a as f32;
            }
        }
    };

    let mut acc = vec![0.0f64; cout];
    for im in 0..n {
        for oi in 0..oh {
            // out_row starts at channel 0 of this (im, oi); channels strided.
            let base = im * cout * oh * ow + oi * ow;
            let (_, tail) = out.data_mut().split_at_mut(base);
            run(im, oi, &mut acc, tail);
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
fn conv2d_backward_input(
    gout: &Tensor,
    w: &Tensor,
    xshape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (n, cout, oh, ow) = dims4(gout, "conv grad output");
    let (cout2, cin, kh, kw) = dims4(w, "conv2d weight");
    assert_eq!(cout, cout2);
    let (h, wd) = (xshape[2], xshape[3]);
    if stride == 1 && kh == kw && padding < kh {
        // Full correlation: convolve the output gradient with the flipped,
        // transposed kernel. Reuses the vectorized forward kernel.
        let mut wflip = Tensor::zeros(&[cin, cout, kh, kw]);
        for co in 0..cout {
            for ci in 0..cin {
                for a in 0..kh {
                    for q in 0..kw {
                        wflip.set4(ci, co, kh - 1 - a, kw - 1 - q, w.at4(co, ci, a, q));
                    }
                }
            }
        }
        let zero_bias = Tensor::zeros(&[cin]);
        let pad_h = kh - 1 - padding;
        let din = conv2d_forward(gout, &wflip, &zero_bias, 1, pad_h);
        assert_eq!(din.shape(), &[n, cin, h, wd], "input grad shape mismatch");
        return din;
    }
    // General strided case, scalar accumulation into an f64 buffer.
    let mut acc = vec![0.0f64; n * cin * h * wd];
    for im in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = gout.at4(im, co, oi, oj) as f64;
                    if gv == 0.0 {
                        continue;
                    }
                    let i0 = (oi * stride) as isize - padding as isize;
                    let j0 = (oj * stride) as isize - padding as isize;
                    for ci in 0..cin {
                        for a in 0..kh {
                            let ii = i0 + a as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for q in 0..kw {
                                let jj = j0 + q as isize;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                let idx = ((im * cin + ci) * h + ii as usize) * wd + jj as usize;
                                acc[idx] += gv * w.at4(co, ci, a, q) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cin, h, wd], acc.into_iter().map(|v| v as f32).collect())
}

/// Gradient w.r.t. the convolution weights.
fn conv2d_backward_weight(
    gout: &Tensor,
    x: &Tensor,
    wshape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (n, cout, oh, ow) = dims4(gout, "conv grad output");
    let (nx, cin, h, wd) = dims4(x, "conv2d input");
    assert_eq!(n, nx);
    let (kh, kw) = (wshape[2], wshape[3]);
    let mut dw = Tensor::zeros(wshape);
    for co in 0..cout {
        for ci in 0..cin {
            for a in 0..kh {
                for q in 0..kw {
                    let mut total = 0.0f64;
                    for im in 0..n {
                        for oi in 0..oh {
                            let ii = (oi * stride) as isize + a as isize - padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            if stride == 1 {
                                // Contiguous rows: vectorizable dot.
                                let j0 = q as isize - padding as isize;
                                let oj_lo = (-j0).max(0) as usize;
                                let oj_hi = (wd as isize - j0).min(ow as isize).max(0) as usize;
                                if oj_lo >= oj_hi {
                                    continue;
                                }
                                let gbase = ((im * cout + co) * oh + oi) * ow;
                                let xbase = ((im * cin + ci) * h + ii as usize) * wd;
                                let grow = &gout.data()[gbase + oj_lo..gbase + oj_hi];
                                let xlo = (j0 + oj_lo as isize) as usize;
                                let xrow = &x.data()[xbase + xlo..xbase + xlo + (oj_hi - oj_lo)];
                                total += dot_f32_f64(grow, xrow);
                            } else {
                                for oj in 0..ow {
                                    let jj = (oj * stride) as isize + q as isize - padding as isize;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    total += gout.at4(im, co, oi, oj) as f64
                                        * x.at4(im, ci, ii as usize, jj as usize) as f64;
                                }
                            }
                        }
                    }
                    dw.set4(co, ci, a, q, total as f32);
                }
            }
        }
    }
    dw
}

/// Summary of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
    pub detail: String,
}

/// Compares `analytic` gradients against central finite differences of
/// `eval` at `theta`. A coordinate passes when
/// `|analytic - fd| <= max(abs_floor, rel_tol * max(|analytic|, |fd|))`.
pub fn check_gradients(
    mut eval: impl FnMut(&[f32]) -> f64,
    theta: &[f32],
    analytic: &[f32],
    h: f32,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheckSummary {
    assert_eq!(theta.len(), analytic.len());
    let mut work = theta.to_vec();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut pass = true;
    let mut detail = String::new();
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = eval(&work);
        work[i] = orig - h;
        let down = eval(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * h as f64);
        let an = analytic[i] as f64;
        let abs_err = (an - fd).abs();
        let scale = an.abs().max(fd.abs());
        let tol = abs_floor.max(rel_tol * scale);
        let rel = if scale > 0.0 { abs_err / scale } else { 0.0 };
        if abs_err > max_abs {
            max_abs = abs_err;
            worst = i;
        }
        max_rel = max_rel.max(rel);
        if abs_err > tol {
            pass = false;
            if detail.len() < 400 {
                detail.push_str(&format!(
                    "coord {i}: analytic {an:.8e} fd {fd:.8e} err {abs_err:.3e} tol {tol:.3e}; "
                ));
            }
        }
    }
    GradCheckSummary {
        checked: theta.len(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_index: worst,
        pass,
        detail,
    }
}
