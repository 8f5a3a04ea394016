//! Evaluation and analysis: confusion-matrix IoU with thing/stuff grouping,
//! pseudolabel accuracy broken down by reliability type, per-class
//! reliability precision, and multi-scale probability averaging.

use alloc::vec::Vec;

use crate::pseudolabel::Interpolation;
use crate::reliability::ReliabilityMap;
use crate::tensor::{LabelMap, Mask, Tensor};
use crate::views::resize_chw_nearest;

/// C x C pixel counts, row = ground truth, column = prediction.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    c: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        ConfusionMatrix { c: num_classes, counts: alloc::vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, gt: &LabelMap, pred: &LabelMap) {
        assert_eq!((gt.h(), gt.w()), (pred.h(), pred.w()), "label map shapes differ");
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            assert!((g as usize) < self.c && (p as usize) < self.c, "label out of range");
            self.counts[g as usize * self.c + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.c, other.c);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.c + pred]
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.c).map(|k| self.get(k, k)).sum();
        correct as f64 / total as f64
    }
}

/// Per-class intersection-over-union and its means. Classes whose union is
/// empty (never present in truth or prediction) are `None` and excluded
/// from every mean.
#[derive(Debug, Clone)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub stuff_miou: f64,
    pub thing_miou: f64,
    pub pixel_accuracy: f64,
}

fn mean_of_present(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Classes below `first_thing_class` count toward the stuff mean, the rest
/// toward the thing mean.
pub fn iou_report(conf: &ConfusionMatrix, first_thing_class: usize) -> IouReport {
    let c = conf.num_classes();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = conf.get(k, k);
        let row: u64 = (0..c).map(|j| conf.get(k, j)).sum();
        let col: u64 = (0..c).map(|i| conf.get(i, k)).sum();
        let union = row + col - tp;
        per_class.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
    }
    IouReport {
        miou: mean_of_present(per_class.iter().copied()),
        stuff_miou: mean_of_present(per_class.iter().take(first_thing_class).copied()),
        thing_miou: mean_of_present(per_class.iter().skip(first_thing_class).copied()),
        pixel_accuracy: conf.pixel_accuracy(),
        per_class,
    }
}

/// Running tallies of pseudolabel correctness by reliability type.
#[derive(Debug, Clone, Default)]
pub struct PseudolabelCounts {
    rel: u64,
    rel_ok: u64,
    unrel: u64,
    unrel_ok: u64,
    nbhd: u64,
    nbhd_ok_before: u64,
    nbhd_ok_after: u64,
    isolated: u64,
    isolated_ok: u64,
}

/// Accuracies per pixel type; absent when no pixel of that type was seen.
/// The three fractions cover {reliable, unreliable with reliable
/// neighborhood, unreliable without} and sum to 1.
#[derive(Debug, Clone)]
pub struct PseudolabelReport {
    pub acc_reliable: Option<f64>,
    pub acc_unreliable: Option<f64>,
    pub acc_nbhd_before: Option<f64>,
    pub acc_nbhd_after: Option<f64>,
    pub acc_isolated: Option<f64>,
    pub frac_reliable: f64,
    pub frac_nbhd: f64,
    pub frac_isolated: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

impl PseudolabelCounts {
    pub fn add(
        &mut self,
        view2: &LabelMap,
        rel: &ReliabilityMap,
        interp: &Interpolation,
        gt: &LabelMap,
    ) {
        let (h, w) = (gt.h(), gt.w());
        assert_eq!((view2.h(), view2.w()), (h, w));
        for i in 0..h {
            for j in 0..w {
                let correct = view2.get(i, j) == gt.get(i, j);
                if rel.r.get(i, j) {
                    self.rel += 1;
                    self.rel_ok += correct as u64;
                    continue;
                }
                self.unrel += 1;
                self.unrel_ok += correct as u64;
                if interp.neighbor_count(i, j) > 0 {
                    self.nbhd += 1;
                    self.nbhd_ok_before += correct as u64;
                    self.nbhd_ok_after += (interp.y_int.get(i, j) == gt.get(i, j)) as u64;
                } else {
                    self.isolated += 1;
                    self.isolated_ok += correct as u64;
                }
            }
        }
    }

    pub fn report(&self) -> PseudolabelReport {
        let total = self.rel + self.unrel;
        let frac = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        PseudolabelReport {
            acc_reliable: ratio(self.rel_ok, self.rel),
            acc_unreliable: ratio(self.unrel_ok, self.unrel),
            acc_nbhd_before: ratio(self.nbhd_ok_before, self.nbhd),
            acc_nbhd_after: ratio(self.nbhd_ok_after, self.nbhd),
            acc_isolated: ratio(self.isolated_ok, self.isolated),
            frac_reliable: frac(self.rel),
            frac_nbhd: frac(self.nbhd),
            frac_isolated: frac(self.isolated),
        }
    }
}

/// Per-class conditional tallies answering "when a prediction of class c is
/// marked reliable, how often is it correct?" and the unreliable converse.
#[derive(Debug, Clone)]
pub struct ReliabilityPrecision {
    rel: Vec<u64>,
    rel_ok: Vec<u64>,
    unrel: Vec<u64>,
    unrel_bad: Vec<u64>,
}

impl ReliabilityPrecision {
    pub fn new(num_classes: usize) -> Self {
        ReliabilityPrecision {
            rel: alloc::vec![0; num_classes],
            rel_ok: alloc::vec![0; num_classes],
            unrel: alloc::vec![0; num_classes],
            unrel_bad: alloc::vec![0; num_classes],
        }
    }

    pub fn add(&mut self, r: &Mask, view2: &LabelMap, gt: &LabelMap) {
        let (h, w) = (gt.h(), gt.w());
        for i in 0..h {
            for j in 0..w {
                let cls = view2.get(i, j) as usize;
                let correct = view2.get(i, j) == gt.get(i, j);
                if r.get(i, j) {
                    self.rel[cls] += 1;
                    self.rel_ok[cls] += correct as u64;
                } else {
                    self.unrel[cls] += 1;
                    self.unrel_bad[cls] += !correct as u64;
                }
            }
        }
    }

    /// P(correct | reliable, predicted class).
    pub fn reliable_precision(&self) -> Vec<Option<f64>> {
        self.rel_ok.iter().zip(&self.rel).map(|(&n, &d)| ratio(n, d)).collect()
    }

    /// P(incorrect | unreliable, predicted class).
    pub fn unreliable_precision(&self) -> Vec<Option<f64>> {
        self.unrel_bad.iter().zip(&self.unrel).map(|(&n, &d)| ratio(n, d)).collect()
    }
}

/// Pearson correlation over paired samples; absent below 2 points or under
/// zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / crate::mathf::sqrt(sxx * syy))
}

/// Average class probabilities over several evaluation scales: resize each
/// image up, predict, resize the probabilities back to native resolution,
/// average in f64, renormalize per pixel.
///
/// `predict` maps an [N,3,h,w] batch to [N,C,h,w] probabilities; the batch
/// is kept together at every scale so batch-statistic normalization sees the
/// same composition.
pub fn multiscale_probs(
    mut predict: impl FnMut(&Tensor) -> Tensor,
    images: &[Tensor],
    scales: &[(usize, usize)],
) -> Vec<Tensor> {
    assert!(!scales.is_empty(), "need at least one evaluation scale");
    assert!(!images.is_empty(), "need at least one image");
    let (native_h, native_w) = (images[0].dim(1), images[0].dim(2));
    let n = images.len();

    let mut acc: Vec<Vec<f64>> = Vec::new();
    let mut num_classes = 0;
    for &(sh, sw) in scales {
        let resized: Vec<Tensor> =
            images.iter().map(|img| resize_chw_nearest(img, sh, sw)).collect();
        let batch = Tensor::stack(&resized);
        let probs = predict(&batch);
        assert_eq!(probs.dim(0), n, "predictor changed the batch size");
        num_classes = probs.dim(1);
        if acc.is_empty() {
            acc = alloc::vec![alloc::vec![0f64; num_classes * native_h * native_w]; n];
        }
        for im in 0..n {
            let native = resize_chw_nearest(&probs.batch_entry(im), native_h, native_w);
            for (slot, &v) in acc[im].iter_mut().zip(native.data()) {
                *slot += v as f64;
            }
        }
    }

    let inv = 1.0 / scales.len() as f64;
    acc.into_iter()
        .map(|buf| {
            let mut out = Tensor::zeros(&[num_classes, native_h, native_w]);
            let plane = native_h * native_w;
            for k in 0..plane {
                let mut sum = 0f64;
                for ch in 0..num_classes {
                    sum += buf[ch * plane + k] * inv;
                }
                for ch in 0..num_classes {
                    let v = if sum > 0.0 {
                        buf[ch * plane + k] * inv / sum
                    } else {
                        1.0 / num_classes as f64
                    };
                    out.data_mut()[ch * plane + k] = v as f32;
                }
            }
            out
        })
        .collect()
}
