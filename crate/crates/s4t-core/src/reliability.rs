//! Pixel reliability estimation: cross-view prediction consistency,
//! class-conditioned confidence thresholds, and their combination into a
//! binary per-pixel reliability map.

use alloc::vec::Vec;

use crate::tensor::{LabelMap, Mask, Tensor};

/// How consistency and confidence combine into the reliable/unreliable split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Reliable = consistent or confident. The default.
    Or,
    /// Reliable = consistent and confident; everything else unreliable.
    AndVsRest,
    /// Reliable = consistent and confident; unreliable = neither; pixels with
    /// exactly one signal are excluded from every loss term.
    AndVsAnd,
}

/// Per-class confidence cutoffs at the top K-th percentile.
///
/// Classes never predicted in the batch hold +inf so confidence alone cannot
/// vouch for them; consistency still can.
#[derive(Debug, Clone)]
pub struct ClassThresholds {
    t: Vec<f32>,
    k_percent: u32,
}

impl ClassThresholds {
    pub fn value(&self, class: u8) -> f32 {
        self.t[class as usize]
    }

    pub fn values(&self) -> &[f32] {
        &self.t
    }

    pub fn k_percent(&self) -> u32 {
        self.k_percent
    }
}

/// Binary reliability decision per pixel, with its two ingredient maps and
/// the loss-participation mask (all-true except under `AndVsAnd`).
#[derive(Debug, Clone)]
pub struct ReliabilityMap {
    pub r: Mask,
    pub consistent: Mask,
    pub confident: Mask,
    pub included: Mask,
}

/// 1 where the two predicted label maps agree.
pub fn consistency_map(view1: &LabelMap, view2: &LabelMap) -> Mask {
    assert_eq!(
        (view1.h(), view1.w()),
        (view2.h(), view2.w()),
        "consistency_map: view shapes differ"
    );
    Mask::from_fn(view1.h(), view1.w(), |i, j| view1.get(i, j) == view2.get(i, j))
}

// Nearest-rank index (0-based) of the upper percentile cut: the value at
// ascending rank ceil((1 - K/100) * n), clamped to rank 1. Integer arithmetic
// keeps the rank exact for every (K, n).
fn percentile_rank_index(n: usize, k_percent: u32) -> usize {
    let rank = ((100 - k_percent as usize) * n).div_ceil(100);
    rank.max(1) - 1
}

/// Per-class thresholds over a prediction batch: for each class, collect the
/// max-probability of every pixel predicted as that class, then cut so that
/// only the top K percent lie strictly above.
///
/// `probs` is [N,C,H,W]; `labels` holds the N predicted label maps.
pub fn class_thresholds(
    probs: &Tensor,
    labels: &[LabelMap],
    num_classes: usize,
    k_percent: u32,
) -> ClassThresholds {
    assert!((1..=100).contains(&k_percent), "percentile K must be in 1..=100");
    assert_eq!(probs.rank(), 4, "class_thresholds expects [N,C,H,W] probabilities");
    let (n, c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
    assert_eq!(n, labels.len(), "one label map per batch entry");
    assert_eq!(c, num_classes, "channel count must equal the class count");

    let mut per_class: Vec<Vec<f32>> = alloc::vec![Vec::new(); num_classes];
    for (bn, lab) in labels.iter().enumerate() {
        assert_eq!((lab.h(), lab.w()), (h, w), "label map shape differs from probs");
        for i in 0..h {
            for j in 0..w {
                let mut conf = probs.at4(bn, 0, i, j);
                for ch in 1..c {
                    let v = probs.at4(bn, ch, i, j);
                    if v > conf {
                        conf = v;
                    }
                }
                per_class[lab.get(i, j) as usize].push(conf);
            }
        }
    }

    let mut t = Vec::with_capacity(num_classes);
    for vals in per_class.iter_mut() {
        if vals.is_empty() {
            t.push(f32::INFINITY);
            continue;
        }
        let idx = percentile_rank_index(vals.len(), k_percent);
        let (_, nth, _) = vals.select_nth_unstable_by(idx, |a, b| {
            a.partial_cmp(b).expect("confidence values must not be NaN")
        });
        t.push(*nth);
    }
    ClassThresholds { t, k_percent }
}

/// Combine consistency and thresholded confidence for one image.
///
/// `probs2` is the [C,H,W] probability map behind `view2`; a pixel is
/// confident when its max probability strictly exceeds the threshold of its
/// predicted class.
pub fn make_reliability(
    view1: &LabelMap,
    view2: &LabelMap,
    probs2: &Tensor,
    thresholds: &ClassThresholds,
    mode: SelectionMode,
) -> ReliabilityMap {
    assert_eq!(probs2.rank(), 3, "make_reliability expects [C,H,W] probabilities");
    let (c, h, w) = (probs2.dim(0), probs2.dim(1), probs2.dim(2));
    assert_eq!((view2.h(), view2.w()), (h, w), "view2 shape differs from probs");
    let consistent = consistency_map(view1, view2);

    let confident = Mask::from_fn(h, w, |i, j| {
        let mut conf = probs2.at3(0, i, j);
        for ch in 1..c {
            let v = probs2.at3(ch, i, j);
            if v > conf {
                conf = v;
            }
        }
        conf > thresholds.value(view2.get(i, j))
    });

    let (r, included) = match mode {
        SelectionMode::Or => (
            Mask::from_fn(h, w, |i, j| consistent.get(i, j) || confident.get(i, j)),
            Mask::from_fn(h, w, |_, _| true),
        ),
        SelectionMode::AndVsRest => (
            Mask::from_fn(h, w, |i, j| consistent.get(i, j) && confident.get(i, j)),
            Mask::from_fn(h, w, |_, _| true),
        ),
        SelectionMode::AndVsAnd => (
            Mask::from_fn(h, w, |i, j| consistent.get(i, j) && confident.get(i, j)),
            Mask::from_fn(h, w, |i, j| consistent.get(i, j) == confident.get(i, j)),
        ),
    };
    ReliabilityMap { r, consistent, confident, included }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn label(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u8) -> LabelMap {
        let mut m = LabelMap::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    // Probabilities with a prescribed max: peak at `lab`, remainder uniform.
    // Valid whenever conf > (1-conf)/(C-1).
    fn probs_with_conf(confs: &[(usize, usize, u8, f32)], c: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::full(&[c, h, w], 1.0 / c as f32);
        for &(i, j, lab, conf) in confs {
            let rest = (1.0 - conf) / (c as f32 - 1.0);
            assert!(conf > rest, "requested confidence is not the max");
            for ch in 0..c {
                t.set3(ch, i, j, if ch as u8 == lab { conf } else { rest });
            }
        }
        t
    }

    fn batch_of(img: &Tensor) -> Tensor {
        Tensor::stack(core::slice::from_ref(img))
    }

    #[test]
    fn consistency_identical_and_disjoint() {
        let a = label(4, 4, |i, j| ((i + j) % 3) as u8);
        let b = label(4, 4, |i, j| ((i + j) % 3) as u8 + 3);
        assert_eq!(consistency_map(&a, &a).count(), 16);
        assert_eq!(consistency_map(&a, &b).count(), 0);
    }

    #[test]
    fn consistency_half_agreement() {
        let a = label(4, 4, |_, _| 0);
        let b = label(4, 4, |i, _| if i < 2 { 0 } else { 1 });
        assert_eq!(consistency_map(&a, &b).count(), 8);
    }

    #[test]
    #[should_panic(expected = "shapes differ")]
    fn consistency_rejects_mismatched_shapes() {
        let a = label(4, 4, |_, _| 0);
        let b = label(4, 5, |_, _| 0);
        consistency_map(&a, &b);
    }

    #[test]
    fn threshold_four_values_median_cut() {
        let c = 8;
        let lab = label(2, 2, |_, _| 3);
        let probs = probs_with_conf(
            &[(0, 0, 3, 0.2), (0, 1, 3, 0.4), (1, 0, 3, 0.6), (1, 1, 3, 0.8)],
            c,
            2,
            2,
        );
        let th = class_thresholds(&batch_of(&probs), core::slice::from_ref(&lab), c, 50);
        assert_eq!(th.value(3), 0.4);

        let rel = make_reliability(&label(2, 2, |_, _| 7), &lab, &probs, &th, SelectionMode::Or);
        // Inconsistent everywhere, so reliability is confidence alone: the
        // two pixels strictly above 0.4.
        assert!(!rel.confident.get(0, 0) && !rel.confident.get(0, 1));
        assert!(rel.confident.get(1, 0) && rel.confident.get(1, 1));
        assert_eq!(rel.r.count(), 2);
    }

    #[test]
    fn threshold_identical_confidences_pass_nothing() {
        let c = 8;
        let lab = label(3, 3, |_, _| 0);
        let probs = probs_with_conf(
            &(0..3).flat_map(|i| (0..3).map(move |j| (i, j, 0u8, 0.7))).collect::<Vec<_>>(),
            c,
            3,
            3,
        );
        let th = class_thresholds(&batch_of(&probs), core::slice::from_ref(&lab), c, 50);
        assert_eq!(th.value(0), 0.7);
        let rel = make_reliability(&label(3, 3, |_, _| 1), &lab, &probs, &th, SelectionMode::Or);
        assert_eq!(rel.confident.count(), 0);
    }

    #[test]
    fn threshold_k100_is_minimum() {
        let c = 8;
        let lab = label(2, 2, |_, _| 5);
        let probs = probs_with_conf(
            &[(0, 0, 5, 0.3), (0, 1, 5, 0.5), (1, 0, 5, 0.5), (1, 1, 5, 0.9)],
            c,
            2,
            2,
        );
        let th = class_thresholds(&batch_of(&probs), core::slice::from_ref(&lab), c, 100);
        assert_eq!(th.value(5), 0.3);
        let rel = make_reliability(&label(2, 2, |_, _| 0), &lab, &probs, &th, SelectionMode::Or);
        assert_eq!(rel.confident.count(), 3);
    }

    #[test]
    fn absent_class_never_confident() {
        let c = 4;
        let lab = label(2, 2, |_, _| 1);
        let probs = probs_with_conf(
            &[(0, 0, 1, 0.9), (0, 1, 1, 0.9), (1, 0, 1, 0.9), (1, 1, 1, 0.9)],
            c,
            2,
            2,
        );
        let th = class_thresholds(&batch_of(&probs), &[lab], c, 50);
        assert_eq!(th.value(0), f32::INFINITY);
        assert_eq!(th.value(2), f32::INFINITY);
        // A pixel whose predicted class never appeared in the threshold batch
        // cannot clear its +inf cutoff.
        let other_lab = label(2, 2, |_, _| 0);
        let other = probs_with_conf(
            &[(0, 0, 0, 0.99), (0, 1, 0, 0.99), (1, 0, 0, 0.99), (1, 1, 0, 0.99)],
            c,
            2,
            2,
        );
        let rel =
            make_reliability(&label(2, 2, |_, _| 3), &other_lab, &other, &th, SelectionMode::Or);
        assert_eq!(rel.confident.count(), 0);
    }

    #[test]
    fn present_class_threshold_within_probability_range() {
        let c = 6;
        let mut rng = Rng::new(0x7e57_0001);
        for _ in 0..50 {
            let (h, w) = (5, 4);
            let mut probs = Tensor::zeros(&[2, c, h, w]);
            let mut labels = Vec::new();
            for n in 0..2 {
                let mut lab = LabelMap::zeros(h, w);
                for i in 0..h {
                    for j in 0..w {
                        // Random positive weights, normalized per pixel.
                        let mut ws = [0f32; 6];
                        let mut sum = 0.0;
                        for wsl in ws.iter_mut() {
                            *wsl = rng.next_f32() + 1e-3;
                            sum += *wsl;
                        }
                        let mut best = 0;
                        for ch in 0..c {
                            let v = ws[ch] / sum;
                            probs.set4(n, ch, i, j, v);
                            if v > ws[best] / sum {
                                best = ch;
                            }
                        }
                        lab.set(i, j, best as u8);
                    }
                }
                labels.push(lab);
            }
            let th = class_thresholds(&probs, &labels, c, 50);
            for (cls, &t) in th.values().iter().enumerate() {
                let present = labels.iter().any(|l| l.data().iter().any(|&v| v as usize == cls));
                if present {
                    assert!(t >= 1.0 / c as f32 - 1e-6 && t <= 1.0, "t out of range: {t}");
                } else {
                    assert!(t.is_infinite());
                }
            }
        }
    }

    // Full-sort nearest-rank reference: sort ascending, take rank
    // ceil((1-K/100)*n) clamped to 1.
    fn thresholds_by_full_sort(
        probs: &Tensor,
        labels: &[LabelMap],
        num_classes: usize,
        k_percent: u32,
    ) -> Vec<f32> {
        let (n, c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
        let mut per_class: Vec<Vec<f32>> = alloc::vec![Vec::new(); num_classes];
        for bn in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut conf = f32::MIN;
                    for ch in 0..c {
                        conf = conf.max(probs.at4(bn, ch, i, j));
                    }
                    per_class[labels[bn].get(i, j) as usize].push(conf);
                }
            }
        }
        per_class
            .into_iter()
            .map(|mut vals| {
                if vals.is_empty() {
                    return f32::INFINITY;
                }
                vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                let rank = ((100 - k_percent as usize) * vals.len()).div_ceil(100).max(1);
                vals[rank - 1]
            })
            .collect()
    }

    fn random_batch(
        rng: &mut Rng,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> (Tensor, Vec<LabelMap>) {
        let mut probs = Tensor::zeros(&[n, c, h, w]);
        let mut labels = Vec::new();
        for bn in 0..n {
            let mut lab = LabelMap::zeros(h, w);
            for i in 0..h {
                for j in 0..w {
                    let mut sum = 0.0;
                    let mut vals = alloc::vec![0f32; c];
                    for v in vals.iter_mut() {
                        *v = rng.next_f32() + 1e-3;
                        sum += *v;
                    }
                    for (ch, v) in vals.iter().enumerate() {
                        probs.set4(bn, ch, i, j, v / sum);
                    }
                    // Labels deliberately decoupled from argmax: the
                    // threshold formula must not assume the coupling.
                    lab.set(i, j, rng.below(c as u64) as u8);
                }
            }
            labels.push(lab);
        }
        (probs, labels)
    }

    #[test]
    fn thresholds_match_full_sort_reference() {
        let mut rng = Rng::new(0x7e57_0002);
        for trial in 0..200 {
            let c = 2 + (trial % 7);
            let n = 1 + (trial % 3);
            let (probs, labels) = random_batch(&mut rng, n, c, 6, 5);
            let k = 1 + rng.below(100) as u32;
            let th = class_thresholds(&probs, &labels, c, k);
            let reference = thresholds_by_full_sort(&probs, &labels, c, k);
            assert_eq!(th.values(), reference.as_slice(), "trial {trial} K={k}");
        }
    }

    #[test]
    fn at_most_k_percent_strictly_above_threshold() {
        let mut rng = Rng::new(0x7e57_0003);
        for trial in 0..100 {
            let c = 3 + (trial % 5);
            let (probs, labels) = random_batch(&mut rng, 2, c, 7, 6);
            let k = 1 + rng.below(100) as u32;
            let th = class_thresholds(&probs, &labels, c, k);
            let (n, _, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
            let mut above = alloc::vec![0usize; c];
            let mut total = alloc::vec![0usize; c];
            for bn in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let cls = labels[bn].get(i, j) as usize;
                        let mut conf = f32::MIN;
                        for ch in 0..c {
                            conf = conf.max(probs.at4(bn, ch, i, j));
                        }
                        total[cls] += 1;
                        if conf > th.values()[cls] {
                            above[cls] += 1;
                        }
                    }
                }
            }
            for cls in 0..c {
                assert!(
                    100 * above[cls] <= k as usize * total[cls],
                    "class {cls}: {} of {} above t with K={k}",
                    above[cls],
                    total[cls]
                );
            }
        }
    }

    #[test]
    fn modes_match_elementwise_boolean_reference() {
        let mut rng = Rng::new(0x7e57_0004);
        for _ in 0..100 {
            let (c, h, w) = (4, 5, 5);
            let (probs, _) = random_batch(&mut rng, 1, c, h, w);
            let img = probs.batch_entry(0);
            let view2 = img.argmax_channels();
            let view1 = label(h, w, |i, j| {
                if rng.next_f32() < 0.5 {
                    view2.get(i, j)
                } else {
                    (view2.get(i, j) + 1) % c as u8
                }
            });
            let th = class_thresholds(&probs, core::slice::from_ref(&view2), c, 50);
            for mode in [SelectionMode::Or, SelectionMode::AndVsRest, SelectionMode::AndVsAnd] {
                let rel = make_reliability(&view1, &view2, &img, &th, mode);
                for i in 0..h {
                    for j in 0..w {
                        let cons = view1.get(i, j) == view2.get(i, j);
                        let mut conf_v = f32::MIN;
                        for ch in 0..c {
                            conf_v = conf_v.max(img.at3(ch, i, j));
                        }
                        let conf = conf_v > th.value(view2.get(i, j));
                        assert_eq!(rel.consistent.get(i, j), cons);
                        assert_eq!(rel.confident.get(i, j), conf);
                        let (want_r, want_inc) = match mode {
                            SelectionMode::Or => (cons || conf, true),
                            SelectionMode::AndVsRest => (cons && conf, true),
                            SelectionMode::AndVsAnd => (cons && conf, cons == conf),
                        };
                        assert_eq!(rel.r.get(i, j), want_r);
                        assert_eq!(rel.included.get(i, j), want_inc);
                    }
                }
            }
        }
    }

    #[test]
    fn or_mode_is_monotone_in_both_signals() {
        let (c, h, w) = (3, 4, 4);
        let mut rng = Rng::new(0x7e57_0005);
        let (probs, _) = random_batch(&mut rng, 1, c, h, w);
        let img = probs.batch_entry(0);
        let view2 = img.argmax_channels();
        let view1_bad = label(h, w, |i, j| (view2.get(i, j) + 1) % c as u8);
        let th = class_thresholds(&probs, core::slice::from_ref(&view2), c, 50);
        let base = make_reliability(&view1_bad, &view2, &img, &th, SelectionMode::Or);
        // Flipping every pixel to consistent can only add reliable pixels.
        let upgraded = make_reliability(&view2, &view2, &img, &th, SelectionMode::Or);
        for i in 0..h {
            for j in 0..w {
                assert!(upgraded.r.get(i, j) >= base.r.get(i, j));
            }
        }
    }

    #[test]
    fn reliability_is_deterministic() {
        let (c, h, w) = (5, 6, 6);
        let mut rng = Rng::new(0x7e57_0006);
        let (probs, labels) = random_batch(&mut rng, 2, c, h, w);
        let th1 = class_thresholds(&probs, &labels, c, 50);
        let th2 = class_thresholds(&probs, &labels, c, 50);
        assert_eq!(th1.values(), th2.values());
        let img = probs.batch_entry(0);
        let v2 = img.argmax_channels();
        let a = make_reliability(&labels[0], &v2, &img, &th1, SelectionMode::Or);
        let b = make_reliability(&labels[0], &v2, &img, &th2, SelectionMode::Or);
        assert_eq!(a.r.data(), b.r.data());
    }
}
