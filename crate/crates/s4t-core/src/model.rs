//! The segmenter: three conv3x3 + batch-norm + relu blocks (3 -> 16 -> 32
//! -> 32 channels) and a 1x1 classifier head, followed by a per-pixel
//! channel softmax. Batch statistics are used at both train and test time;
//! there are no running stats, so outputs depend on batch composition by
//! design.
//!
//! Also here: the parameter registry with gradient buffers, Adam with
//! decoupled weight decay and an update scope (affine batch-norm parameters
//! only, or everything), and supervised source training.

use crate::mathf;
use crate::rng::{streams, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::{LabelMap, Tensor};
use crate::views;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

pub const BN_EPS: f32 = 1e-5;
/// Channel plan: input RGB through three blocks.
pub const CHANNELS: [usize; 4] = [3, 16, 32, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    BnAffine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    BnOnly,
    AllParams,
}

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    /// Bumped by `gather`; `Adam::step` requires it to be nonzero.
    backward_passes: u32,
}

impl ParamSet {
    fn push(&mut self, name: &str, kind: ParamKind, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.to_string(), kind, value, grad });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, pid: usize) -> &Param {
        &self.params[pid]
    }

    pub fn get_mut(&mut self, pid: usize) -> &mut Param {
        &mut self.params[pid]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Adds the tape's parameter gradients into the persistent buffers.
    /// Call once per backward pass; accumulation across passes is additive.
    pub fn gather(&mut self, tape: &Tape) {
        for &(pid, node) in tape.bindings() {
            if let Some(g) = tape.grad(node) {
                let buf = self.params[pid].grad.data_mut();
                assert_eq!(buf.len(), g.len(), "gradient shape mismatch for param {pid}");
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
        self.backward_passes += 1;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
        self.backward_passes = 0;
    }

    pub fn backward_passes(&self) -> u32 {
        self.backward_passes
    }

    /// FNV-1a digest over the values of all parameters of `kind` (or all),
    /// in registration order. For change/no-change checks.
    pub fn digest(&self, kind: Option<ParamKind>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if kind.is_none_or(|k| p.kind == k) {
                for v in p.value.data() {
                    for b in v.to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x1000_0000_01b3);
                    }
                }
            }
        }
        h
    }
}

/// Parameter ids for one conv (+ optional batch-norm) layer.
#[derive(Clone, Copy)]
struct LayerIds {
    weight: usize,
    bias: usize,
    bn: Option<(usize, usize)>,
}

#[derive(Clone)]
pub struct SegNet {
    pub num_classes: usize,
    pub params: ParamSet,
    layers: Vec<LayerIds>,
}

/// Gradient tracking mode for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    /// Inference only; backward through this graph is a no-op.
    NoGrad,
    /// Track gradients for the parameters selected by the scope.
    Grad(UpdateScope),
}

impl SegNet {
    /// Fresh network with Kaiming-uniform conv weights, zero biases,
    /// gamma = 1, beta = 0.
    pub fn new(num_classes: usize, seed: u64) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        let mut params = ParamSet::default();
        let mut layers = Vec::new();
        for l in 0..3 {
            let (cin, cout) = (CHANNELS[l], CHANNELS[l + 1]);
            let mut rng = Rng::stream(seed, &[streams::WEIGHT_INIT, l as u64]);
            let w = kaiming_uniform(&[cout, cin, 3, 3], &mut rng);
            let weight = params.push(&format!("conv{}.weight", l + 1), ParamKind::Conv, w);
            let bias = params.push(
                &format!("conv{}.bias", l + 1),
                ParamKind::Conv,
                Tensor::zeros(&[cout]),
            );
            let gamma = params.push(
                &format!("bn{}.gamma", l + 1),
                ParamKind::BnAffine,
                Tensor::full(&[cout], 1.0),
            );
            let beta = params.push(
                &format!("bn{}.beta", l + 1),
                ParamKind::BnAffine,
                Tensor::zeros(&[cout]),
            );
            layers.push(LayerIds { weight, bias, bn: Some((gamma, beta)) });
        }
        let mut rng = Rng::stream(seed, &[streams::WEIGHT_INIT, 3]);
        let w = kaiming_uniform(&[num_classes, CHANNELS[3], 1, 1], &mut rng);
        let weight = params.push("head.weight", ParamKind::Conv, w);
        let bias = params.push("head.bias", ParamKind::Conv, Tensor::zeros(&[num_classes]));
        layers.push(LayerIds { weight, bias, bn: None });
        SegNet { num_classes, params, layers }
    }

    /// Builds the forward graph for a `[N, 3, H, W]` batch and returns the
    /// node of the `[N, C, H, W]` per-pixel class probabilities.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, track: Track) -> NodeId {
        assert_eq!(images.rank(), 4, "images must be [N, 3, H, W]");
        assert_eq!(images.dim(1), CHANNELS[0], "images must have 3 channels");
        let trainable = |kind: ParamKind| match track {
            Track::NoGrad => false,
            Track::Grad(UpdateScope::AllParams) => true,
            Track::Grad(UpdateScope::BnOnly) => kind == ParamKind::BnAffine,
        };
        let mut x = tape.leaf(images.clone(), false);
        for (i, layer) in self.layers.iter().enumerate() {
            let is_head = i + 1 == self.layers.len();
            let wp = self.params.get(layer.weight);
            let bp = self.params.get(layer.bias);
            let w = tape.param(layer.weight, wp.value.clone(), trainable(wp.kind));
            let b = tape.param(layer.bias, bp.value.clone(), trainable(bp.kind));
            let padding = if is_head { 0 } else { 1 };
            x = tape.conv2d(x, w, b, 1, padding);
            if let Some((gid, bid)) = layer.bn {
                let gp = self.params.get(gid);
                let btp = self.params.get(bid);
                let g = tape.param(gid, gp.value.clone(), trainable(gp.kind));
                let bt = tape.param(bid, btp.value.clone(), trainable(btp.kind));
                x = tape.batch_norm2d(x, g, bt, BN_EPS);
                x = tape.relu(x);
            }
        }
        tape.softmax_channels(x)
    }

    /// Inference convenience: probabilities for a batch, no graph kept.
    pub fn predict_probs(&self, images: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let probs = self.forward(&mut tape, images, Track::NoGrad);
        tape.value(probs).clone()
    }

    /// Parameters as named tensors, in registration order.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Rebuilds a network from named tensors, validating every name and
    /// shape against the fixed architecture.
    pub fn from_named_tensors(entries: &[(String, Tensor)]) -> Result<SegNet, String> {
        let head = entries
            .iter()
            .find(|(n, _)| n == "head.weight")
            .ok_or_else(|| "checkpoint is missing head.weight".to_string())?;
        if head.1.rank() != 4 {
            return Err(format!("head.weight must be rank 4, got shape {:?}", head.1.shape()));
        }
        let num_classes = head.1.dim(0);
        if num_classes < 2 {
            return Err(format!("head.weight implies {num_classes} classes"));
        }
        let mut net = SegNet::new(num_classes, 0);
        if entries.len() != net.params.len() {
            return Err(format!(
                "checkpoint has {} tensors, expected {}",
                entries.len(),
                net.params.len()
            ));
        }
        for (name, tensor) in entries {
            let pid = (0..net.params.len())
                .find(|&i| &net.params.get(i).name == name)
                .ok_or_else(|| format!("unexpected tensor '{name}' in checkpoint"))?;
            let want = net.params.get(pid).value.shape().to_vec();
            if tensor.shape() != want.as_slice() {
                return Err(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    want
                ));
            }
            net.params.get_mut(pid).value = tensor.clone();
        }
        Ok(net)
    }
}

fn kaiming_uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = mathf::sqrt(6.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect())
}

// ── optimizer ──

pub struct Adam {
    pub lr: f32,
    pub weight_decay: f32,
    pub scope: UpdateScope,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32, weight_decay: f32, scope: UpdateScope) -> Self {
        Adam {
            lr,
            weight_decay,
            scope,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    fn in_scope(&self, kind: ParamKind) -> bool {
        match self.scope {
            UpdateScope::AllParams => true,
            UpdateScope::BnOnly => kind == ParamKind::BnAffine,
        }
    }

    /// One Adam step with decoupled weight decay over the in-scope
    /// parameters. Consumes the accumulated gradients (they are zeroed).
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), String> {
        if params.backward_passes() == 0 {
            return Err("optimizer step without a preceding backward pass".to_string());
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for pid in 0..params.len() {
            if !self.in_scope(params.get(pid).kind) {
                continue;
            }
            let lr = self.lr as f64;
            let wd = self.weight_decay as f64;
            let m = self.m[pid].data_mut();
            let v = self.v[pid].data_mut();
            let p = params.get_mut(pid);
            for i in 0..m.len() {
                let g = p.grad.data()[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let theta = p.value.data()[i] as f64;
                let update = lr * mhat / (mathf::sqrt(vhat) + self.eps) + lr * wd * theta;
                p.value.data_mut()[i] = (theta - update) as f32;
            }
        }
        params.zero_grads();
        Ok(())
    }
}

// ── source training ──

pub struct TrainEpoch {
    pub mean_loss: f64,
    pub pixel_acc: f64,
}

pub struct TrainLog {
    pub epochs: Vec<TrainEpoch>,
}

/// Supervised training on labeled source images with horizontal-flip
/// augmentation. Updates all parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_source(
    model: &mut SegNet,
    images: &[Tensor],
    labels: &[LabelMap],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    weight_decay: f32,
    seed: u64,
) -> TrainLog {
    assert_eq!(images.len(), labels.len(), "every image needs a label map");
    assert!(batch_size >= 1);
    let mut opt = Adam::new(&model.params, lr, weight_decay, UpdateScope::AllParams);
    let mut log = TrainLog { epochs: Vec::new() };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        Rng::stream(seed, &[streams::SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut px_total = 0usize;
        let mut px_correct = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut batch_images = Vec::with_capacity(chunk.len());
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let flip =
                    Rng::stream(seed, &[streams::FLIP, epoch as u64, idx as u64]).next_f64() < 0.5;
                if flip {
                    batch_images.push(views::flip_image(&images[idx]));
                    batch_labels.push(views::flip_label(&labels[idx]));
                } else {
                    batch_images.push(images[idx].clone());
                    batch_labels.push(labels[idx].clone());
                }
            }
            let batch = Tensor::stack(&batch_images);
            let mut tape = Tape::new();
            let probs = model.forward(&mut tape, &batch, Track::Grad(UpdateScope::AllParams));
            let mut flat_labels = Vec::with_capacity(chunk.len() * batch.dim(2) * batch.dim(3));
            for lm in &batch_labels {
                flat_labels.extend_from_slice(lm.data());
            }
            let n_px = flat_labels.len();
            let loss = tape.weighted_nll(probs, flat_labels, vec![1.0; n_px], 1e-8);
            tape.backward(loss);
            model.params.gather(&tape);
            loss_sum += tape.scalar64(loss) * n_px as f64;
            for (n, lm) in batch_labels.iter().enumerate() {
                let pred = tape.value(probs).batch_entry(n).argmax_channels();
                for (a, b) in pred.data().iter().zip(lm.data()) {
                    if a == b {
                        px_correct += 1;
                    }
                }
            }
            px_total += n_px;
            opt.step(&mut model.params).expect("backward ran this batch");
        }
        log.epochs.push(TrainEpoch {
            mean_loss: loss_sum / px_total as f64,
            pixel_acc: px_correct as f64 / px_total as f64,
        });
    }
    log
}
