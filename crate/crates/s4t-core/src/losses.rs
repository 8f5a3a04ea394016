//! Adaptation losses: the selective self-training objective with its
//! reliable / interpolated / entropy-maximization branches, the
//! frequency-regularization term, their weighted combination, and the
//! unselective baselines.
//!
//! Every term is a mean over all N*H*W pixels, so the mixing weights are
//! scale-free across image and batch sizes. Pixels that contribute to no
//! branch (zero weight) still count in the denominator.

use alloc::vec::Vec;

use crate::mathf;
use crate::pseudolabel::{Interpolation, FREQ_EPS};
use crate::reliability::ReliabilityMap;
use crate::tape::{NodeId, Tape};
use crate::tensor::LabelMap;

// Stabilizer added to probabilities inside every log.
pub const LOG_EPS: f32 = 1e-8;

/// Unselective self-training baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Minimize mean per-pixel prediction entropy.
    EntMin,
    /// Cross-entropy against the model's own argmax at every pixel.
    CeAll,
}

/// Scalar values of each loss component, plus how many pixels fed each
/// branch. Field values are unscaled means; the mixing identity is
/// `total = sst_reliable + alpha*(sst_interp + sst_entmax) + beta*ie`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub sst_reliable: f64,
    pub sst_interp: f64,
    pub sst_entmax: f64,
    pub ie: f64,
    pub px_reliable: usize,
    pub px_interp: usize,
    pub px_entmax: usize,
    pub px_excluded: usize,
}

/// Per-image ingredients of one adaptation batch, aligned with the batched
/// probability node's entries.
pub struct S4tBatch<'a> {
    pub view2: &'a [LabelMap],
    pub reliability: &'a [ReliabilityMap],
    pub interpolation: &'a [Interpolation],
}

/// The three self-training branch nodes before mixing.
pub struct SstBranches {
    pub reliable: NodeId,
    pub interp: NodeId,
    pub entmax: NodeId,
    pub px_reliable: usize,
    pub px_interp: usize,
    pub px_entmax: usize,
    pub px_excluded: usize,
}

fn batch_dims(tape: &Tape, probs2: NodeId, batch: &S4tBatch) -> (usize, usize, usize, usize) {
    let p = tape.value(probs2);
    assert_eq!(p.rank(), 4, "loss expects [N,C,H,W] probabilities");
    let (n, c, h, w) = (p.dim(0), p.dim(1), p.dim(2), p.dim(3));
    assert_eq!(batch.view2.len(), n, "one predicted label map per image");
    assert_eq!(batch.reliability.len(), n, "one reliability map per image");
    assert_eq!(batch.interpolation.len(), n, "one interpolation per image");
    for im in 0..n {
        assert_eq!((batch.view2[im].h(), batch.view2[im].w()), (h, w));
        assert_eq!((batch.interpolation[im].h(), batch.interpolation[im].w()), (h, w));
    }
    (n, c, h, w)
}

/// Selective self-training loss. Each pixel lands in exactly one branch:
/// reliable pixels get class-weighted cross-entropy against their own
/// prediction, unreliable pixels with reliable neighbors get
/// neighbor-weighted cross-entropy against the interpolated label, and
/// isolated unreliable pixels get entropy maximization. The two unreliable
/// branches are scaled by `alpha`; pseudolabels enter as constants.
pub fn sst_loss(
    tape: &mut Tape,
    probs2: NodeId,
    batch: &S4tBatch,
    lambda: &[f32],
    alpha: f32,
) -> (NodeId, SstBranches) {
    let (n, c, h, w) = batch_dims(tape, probs2, batch);
    assert_eq!(lambda.len(), c, "lambda must have one weight per class");
    assert!(alpha >= 0.0, "alpha must be non-negative");

    let px = n * h * w;
    let mut rel_labels = Vec::with_capacity(px);
    let mut rel_weights = alloc::vec![0f32; px];
    let mut int_labels = Vec::with_capacity(px);
    let mut int_weights = alloc::vec![0f32; px];
    let mut ent_mask = alloc::vec![0u8; px];
    let (mut n_rel, mut n_int, mut n_ent, mut n_exc) = (0usize, 0usize, 0usize, 0usize);

    for im in 0..n {
        let rel = &batch.reliability[im];
        let interp = &batch.interpolation[im];
        for i in 0..h {
            for j in 0..w {
                let flat = im * h * w + i * w + j;
                let v2 = batch.view2[im].get(i, j);
                rel_labels.push(v2);
                int_labels.push(interp.y_int.get(i, j));
                if !rel.included.get(i, j) {
                    n_exc += 1;
                } else if rel.r.get(i, j) {
                    rel_weights[flat] = lambda[v2 as usize];
                    n_rel += 1;
                } else if interp.neighbor_count(i, j) > 0 {
                    int_weights[flat] =
                        lambda[interp.y_int.get(i, j) as usize] * interp.weight(i, j);
                    n_int += 1;
                } else {
                    ent_mask[flat] = 1;
                    n_ent += 1;
                }
            }
        }
    }

    let reliable = tape.weighted_nll(probs2, rel_labels, rel_weights, LOG_EPS);
    let interp = tape.weighted_nll(probs2, int_labels, int_weights, LOG_EPS);
    let entmax = tape.masked_neg_entropy(probs2, ent_mask, LOG_EPS);

    let scaled = {
        let unreliable = tape.add(interp, entmax);
        tape.scale(unreliable, alpha)
    };
    let total = tape.add(reliable, scaled);
    (
        total,
        SstBranches {
            reliable,
            interp,
            entmax,
            px_reliable: n_rel,
            px_interp: n_int,
            px_entmax: n_ent,
            px_excluded: n_exc,
        },
    )
}

/// Frequency regularizer: mean over pixels of `sum_c p_c * ln q_c` with the
/// running frequencies floored. Minimizing it pushes probability mass away
/// from recently frequent classes.
pub fn ie_loss(tape: &mut Tape, probs2: NodeId, q: &[f32]) -> NodeId {
    let log_q: Vec<f32> = q.iter().map(|&qc| mathf::ln((qc as f64).max(FREQ_EPS)) as f32).collect();
    tape.mean_channel_dot(probs2, log_q)
}

/// Complete adaptation objective:
/// `sst_reliable + alpha*(sst_interp + sst_entmax) + beta*ie`.
pub fn s4t_loss(
    tape: &mut Tape,
    probs2: NodeId,
    batch: &S4tBatch,
    lambda: &[f32],
    q: &[f32],
    alpha: f32,
    beta: f32,
) -> (NodeId, LossBreakdown) {
    let (sst, branches) = sst_loss(tape, probs2, batch, lambda, alpha);
    let ie = ie_loss(tape, probs2, q);
    let scaled_ie = tape.scale(ie, beta);
    let total = tape.add(sst, scaled_ie);
    let breakdown = LossBreakdown {
        total: tape.scalar64(total),
        sst_reliable: tape.scalar64(branches.reliable),
        sst_interp: tape.scalar64(branches.interp),
        sst_entmax: tape.scalar64(branches.entmax),
        ie: tape.scalar64(ie),
        px_reliable: branches.px_reliable,
        px_interp: branches.px_interp,
        px_entmax: branches.px_entmax,
        px_excluded: branches.px_excluded,
    };
    (total, breakdown)
}

/// Unselective baselines: entropy minimization over every pixel, or plain
/// cross-entropy against the model's own argmax everywhere.
pub fn baseline_loss(tape: &mut Tape, probs2: NodeId, kind: BaselineKind) -> NodeId {
    let p = tape.value(probs2);
    assert_eq!(p.rank(), 4, "loss expects [N,C,H,W] probabilities");
    let (n, h, w) = (p.dim(0), p.dim(2), p.dim(3));
    let px = n * h * w;
    match kind {
        BaselineKind::EntMin => {
            // The minimization target is the entropy itself, -sum p ln p:
            // descending on it sharpens predictions toward one-hot.
            let neg_entropy = tape.masked_neg_entropy(probs2, alloc::vec![1u8; px], LOG_EPS);
            tape.scale(neg_entropy, -1.0)
        }
        BaselineKind::CeAll => {
            let mut labels = Vec::with_capacity(px);
            for im in 0..n {
                let arg = tape.value(probs2).batch_entry(im).argmax_channels();
                labels.extend_from_slice(arg.data());
            }
            tape.weighted_nll(probs2, labels, alloc::vec![1f32; px], LOG_EPS)
        }
    }
}
