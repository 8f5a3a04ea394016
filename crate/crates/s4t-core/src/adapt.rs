//! The adaptation loop: per batch, build two aligned views, estimate
//! reliability (self-supervised or oracle-driven), interpolate pseudolabels,
//! update running class statistics, and take one scoped optimizer step on
//! the selected objective.
//!
//! Ground-truth labels are accepted only for the oracle modes; with the
//! oracle off they are never read, so adaptation stays source-free.

use crate::config::{AdaptConfig, LossChoice, OracleMode};
use crate::losses::{baseline_loss, s4t_loss, BaselineKind, LossBreakdown, S4tBatch};
use crate::model::{Adam, SegNet, Track};
use crate::pseudolabel::{interpolate, ClassStats, Interpolation};
use crate::reliability::{class_thresholds, make_reliability, ReliabilityMap};
use crate::rng::{streams, Rng};
use crate::tape::Tape;
use crate::tensor::{LabelMap, Mask, Tensor};
use crate::views::{crop_chw, resize_chw_nearest, resize_label_nearest, sample_bbox, BBox};
use alloc::vec::Vec;

/// Ground truth aligned to the view grid: crop the label map to the box,
/// resize to the view resolution with the shared nearest-neighbor index map.
pub fn aligned_gt_view(gt: &LabelMap, bbox: BBox, out_h: usize, out_w: usize) -> LabelMap {
    resize_label_nearest(&gt.crop(bbox.top, bbox.left, bbox.h, bbox.w), out_h, out_w)
}

/// View-1 labels and view-2 model inputs for one batch: a batched no-grad
/// forward over the full images, then per-image crop and resize of both the
/// argmax prediction and the raw image.
pub struct ViewInputs {
    pub bboxes: Vec<BBox>,
    pub view1: Vec<LabelMap>,
    pub inputs2: Vec<Tensor>,
}

pub fn build_view_inputs(
    model: &SegNet,
    batch_images: &[Tensor],
    crop_rng: &mut Rng,
) -> ViewInputs {
    let full_batch = Tensor::stack(batch_images);
    let (h, w) = (full_batch.dim(2), full_batch.dim(3));
    let probs1 = model.predict_probs(&full_batch);
    let mut bboxes = Vec::with_capacity(batch_images.len());
    let mut view1 = Vec::with_capacity(batch_images.len());
    let mut inputs2 = Vec::with_capacity(batch_images.len());
    for (slot, image) in batch_images.iter().enumerate() {
        let full_label = probs1.batch_entry(slot).argmax_channels();
        let bbox = sample_bbox(h, w, crop_rng);
        view1.push(resize_label_nearest(
            &full_label.crop(bbox.top, bbox.left, bbox.h, bbox.w),
            h,
            w,
        ));
        inputs2.push(resize_chw_nearest(&crop_chw(image, bbox), h, w));
        bboxes.push(bbox);
    }
    ViewInputs { bboxes, view1, inputs2 }
}

/// Reliability from the model's own signals, honoring the selection
/// toggles: with both criteria enabled the configured combination mode
/// applies; with one, that criterion alone; with neither, everything is
/// reliable (unconstrained self-training).
pub fn self_supervised_maps(
    cfg: &AdaptConfig,
    num_classes: usize,
    view1: &[LabelMap],
    view2: &[LabelMap],
    probs2: &Tensor,
) -> Vec<ReliabilityMap> {
    let (h, w) = (probs2.dim(2), probs2.dim(3));
    let thresholds = class_thresholds(probs2, view2, num_classes, cfg.k_percent);
    (0..view2.len())
        .map(|s| {
            let full = make_reliability(
                &view1[s],
                &view2[s],
                &probs2.batch_entry(s),
                &thresholds,
                cfg.selection_mode,
            );
            let everything = Mask::from_fn(h, w, |_, _| true);
            match (cfg.confidence, cfg.consistency) {
                (true, true) => full,
                (false, true) => {
                    ReliabilityMap { r: full.consistent.clone(), included: everything, ..full }
                }
                (true, false) => {
                    ReliabilityMap { r: full.confident.clone(), included: everything, ..full }
                }
                (false, false) => {
                    ReliabilityMap { r: everything.clone(), included: everything, ..full }
                }
            }
        })
        .collect()
}

/// Everything one optimizer step produced, for logging and analysis.
/// Per-image vectors are aligned with `indices`.
pub struct AdaptStep {
    pub epoch: usize,
    pub step: usize,
    pub indices: Vec<usize>,
    pub bboxes: Vec<BBox>,
    pub view1: Vec<LabelMap>,
    pub view2: Vec<LabelMap>,
    pub reliability: Vec<ReliabilityMap>,
    pub interpolation: Vec<Interpolation>,
    /// Running class frequencies after observing this batch.
    pub q: Vec<f32>,
    /// Class weights actually applied to this step's loss.
    pub lambda: Vec<f32>,
    pub breakdown: LossBreakdown,
}

impl AdaptStep {
    /// Pixel fractions of {reliable, interpolated, entropy-max, excluded}.
    pub fn type_fractions(&self) -> [f64; 4] {
        let b = &self.breakdown;
        let total = b.px_reliable + b.px_interp + b.px_entmax + b.px_excluded;
        let total = total.max(1) as f64;
        [
            b.px_reliable as f64 / total,
            b.px_interp as f64 / total,
            b.px_entmax as f64 / total,
            b.px_excluded as f64 / total,
        ]
    }
}

pub struct AdaptEngine {
    cfg: AdaptConfig,
    model: SegNet,
    opt: Adam,
    stats: ClassStats,
    step: usize,
}

impl AdaptEngine {
    pub fn new(model: SegNet, cfg: &AdaptConfig) -> Self {
        assert_eq!(
            model.num_classes, cfg.num_classes,
            "checkpoint has {} classes but config says {}",
            model.num_classes, cfg.num_classes
        );
        cfg.validate().expect("config must be validated before adaptation");
        let opt = Adam::new(&model.params, cfg.lr, cfg.weight_decay, cfg.scope);
        let stats = ClassStats::new(model.num_classes, cfg.q_batches, cfg.eta);
        AdaptEngine { cfg: cfg.clone(), model, opt, stats, step: 0 }
    }

    pub fn model(&self) -> &SegNet {
        &self.model
    }

    pub fn into_model(self) -> SegNet {
        self.model
    }

    pub fn stats(&self) -> &ClassStats {
        &self.stats
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One full adaptation run over the target images: `epochs` shuffled
    /// passes of scoped optimizer steps, invoking `on_step` after each.
    /// `gt_labels` is required by the oracle modes and ignored otherwise.
    pub fn run(
        &mut self,
        images: &[Tensor],
        gt_labels: Option<&[LabelMap]>,
        mut on_step: impl FnMut(&AdaptStep),
    ) {
        assert!(!images.is_empty(), "no target images to adapt on");
        if self.cfg.oracle_mode() != OracleMode::Off {
            let gt = gt_labels.expect("oracle modes need ground-truth labels");
            assert_eq!(gt.len(), images.len(), "one label map per target image");
        }
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            Rng::stream(self.cfg.seed, &[streams::SHUFFLE, epoch as u64]).shuffle(&mut order);
            let mut crop_rng = Rng::stream(self.cfg.seed, &[streams::CROP, epoch as u64]);
            for chunk in order.chunks(self.cfg.batch_size) {
                let record = self.adapt_batch(epoch, chunk, images, gt_labels, &mut crop_rng);
                on_step(&record);
            }
        }
    }

    fn adapt_batch(
        &mut self,
        epoch: usize,
        chunk: &[usize],
        images: &[Tensor],
        gt_labels: Option<&[LabelMap]>,
        crop_rng: &mut Rng,
    ) -> AdaptStep {
        let c = self.model.num_classes;
        let batch_imgs: Vec<Tensor> = chunk.iter().map(|&i| images[i].clone()).collect();
        let (h, w) = (batch_imgs[0].dim(1), batch_imgs[0].dim(2));
        let ViewInputs { bboxes, view1, inputs2 } =
            build_view_inputs(&self.model, &batch_imgs, crop_rng);

        // View 2: gradient-tracked prediction on the resized crops.
        let mut tape = Tape::new();
        let input2_batch = Tensor::stack(&inputs2);
        let probs2 = self.model.forward(&mut tape, &input2_batch, Track::Grad(self.cfg.scope));
        let probs2_val = tape.value(probs2).clone();
        let view2: Vec<LabelMap> =
            (0..chunk.len()).map(|s| probs2_val.batch_entry(s).argmax_channels()).collect();

        let mut reliability = match self.cfg.oracle_mode() {
            OracleMode::Off => self_supervised_maps(&self.cfg, c, &view1, &view2, &probs2_val),
            mode => self.oracle_maps(mode, epoch, chunk, &bboxes, &view2, gt_labels),
        };
        if !self.cfg.interpolation {
            // Unreliable pixels get no loss at all in this ablation: narrow
            // the participation mask to the reliable set.
            for rel in &mut reliability {
                let narrowed =
                    Mask::from_fn(h, w, |i, j| rel.included.get(i, j) && rel.r.get(i, j));
                rel.included = narrowed;
            }
        }

        let all_reliable = Mask::from_fn(h, w, |_, _| true);
        let interpolation: Vec<Interpolation> = (0..chunk.len())
            .map(|s| {
                let r = if self.cfg.interpolation { &reliability[s].r } else { &all_reliable };
                interpolate(r, &probs2_val.batch_entry(s), self.cfg.neighborhood)
            })
            .collect();

        self.stats.observe(&view2);
        let lambda: Vec<f32> =
            if self.cfg.loss_weights { self.stats.lambda().to_vec() } else { alloc::vec![1.0; c] };
        let beta = if self.cfg.ie_reg { self.cfg.beta } else { 0.0 };

        let (loss_node, breakdown) = match self.cfg.loss {
            LossChoice::S4t => {
                let batch = S4tBatch {
                    view2: &view2,
                    reliability: &reliability,
                    interpolation: &interpolation,
                };
                s4t_loss(&mut tape, probs2, &batch, &lambda, self.stats.q(), self.cfg.alpha, beta)
            }
            LossChoice::EntMin | LossChoice::CeAll => {
                let kind = if self.cfg.loss == LossChoice::EntMin {
                    BaselineKind::EntMin
                } else {
                    BaselineKind::CeAll
                };
                let node = baseline_loss(&mut tape, probs2, kind);
                let breakdown = LossBreakdown {
                    total: tape.scalar64(node),
                    sst_reliable: 0.0,
                    sst_interp: 0.0,
                    sst_entmax: 0.0,
                    ie: 0.0,
                    px_reliable: 0,
                    px_interp: 0,
                    px_entmax: 0,
                    px_excluded: 0,
                };
                (node, breakdown)
            }
        };

        tape.backward(loss_node);
        self.model.params.gather(&tape);
        self.opt.step(&mut self.model.params).expect("backward ran this step");

        let record = AdaptStep {
            epoch,
            step: self.step,
            indices: chunk.to_vec(),
            bboxes,
            view1,
            view2,
            reliability,
            interpolation,
            q: self.stats.q().to_vec(),
            lambda,
            breakdown,
        };
        self.step += 1;
        record
    }

    /// Reliability from ground truth: a pixel is reliable iff view 2 agrees
    /// with the aligned label, optionally with exactly round(P*H*W/100)
    /// deterministically chosen bits flipped per image.
    fn oracle_maps(
        &self,
        mode: OracleMode,
        epoch: usize,
        chunk: &[usize],
        bboxes: &[BBox],
        view2: &[LabelMap],
        gt_labels: Option<&[LabelMap]>,
    ) -> Vec<ReliabilityMap> {
        let gt = gt_labels.expect("oracle modes need ground-truth labels");
        (0..chunk.len())
            .map(|s| {
                let (h, w) = (view2[s].h(), view2[s].w());
                let gt_view = aligned_gt_view(&gt[chunk[s]], bboxes[s], h, w);
                let mut r = Mask::from_fn(h, w, |i, j| view2[s].get(i, j) == gt_view.get(i, j));
                if let OracleMode::Noisy(p) = mode {
                    let flips = crate::mathf::round(p as f64 * (h * w) as f64 / 100.0) as usize;
                    let mut rng = Rng::stream(
                        self.cfg.seed,
                        &[streams::ORACLE_NOISE, epoch as u64, chunk[s] as u64],
                    );
                    for flat in rng.distinct_indices(h * w, flips) {
                        let (i, j) = (flat / w, flat % w);
                        r.set(i, j, !r.get(i, j));
                    }
                }
                ReliabilityMap {
                    consistent: r.clone(),
                    confident: r.clone(),
                    included: Mask::from_fn(h, w, |_, _| true),
                    r,
                }
            })
            .collect()
    }
}
