//! Two aligned predictive views of one image.
//!
//! View 1: predict on the full image, take the per-pixel argmax, crop a
//! random box, resize the label crop back to full resolution. View 2: crop
//! the same box from the raw image, resize it to full resolution, predict
//! on that. Both views live on the same grid; for a pointwise classifier
//! they agree exactly, and for a real network their disagreement is the
//! consistency signal.
//!
//! All resizing is nearest-neighbor with half-pixel centers:
//! `src = floor((dst + 0.5) * in / out)`. The same index map is used for
//! labels, images, and probability maps, which is what makes the two views
//! align pixel for pixel.

use crate::mathf;
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};
use alloc::vec::Vec;

/// Crop box: rows [top, top + h), cols [left, left + w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

/// Area fraction of the crop relative to the full image.
const AREA_LO: f64 = 0.25;
const AREA_HI: f64 = 0.50;
const MAX_TRIES: usize = 100;

/// Samples a crop box with the image's aspect ratio, area between 25% and
/// 50% of the image, and uniform position. Heights are drawn uniformly from
/// the admissible integer range; the rare box that rounds outside the area
/// bounds is rejected and redrawn.
pub fn sample_bbox(h: usize, w: usize, rng: &mut Rng) -> BBox {
    assert!(h >= 2 && w >= 2, "image {h}x{w} too small to crop");
    let lo = mathf::ceil(h as f64 * mathf::sqrt(AREA_LO)) as usize;
    let hi = libm::floor(h as f64 * mathf::sqrt(AREA_HI)) as usize;
    assert!(lo <= hi && lo >= 1, "no admissible crop height for {h}x{w}");
    for _ in 0..MAX_TRIES {
        let bh = rng.range_inclusive(lo as u64, hi as u64) as usize;
        let bw = libm::round(bh as f64 * w as f64 / h as f64) as usize;
        if bw < 1 || bw > w {
            continue;
        }
        let frac = (bh * bw) as f64 / (h * w) as f64;
        if !(AREA_LO..=AREA_HI).contains(&frac) {
            continue;
        }
        let top = rng.range_inclusive(0, (h - bh) as u64) as usize;
        let left = rng.range_inclusive(0, (w - bw) as u64) as usize;
        return BBox { top, left, h: bh, w: bw };
    }
    panic!("no admissible crop box for {h}x{w} after {MAX_TRIES} tries");
}

/// Nearest-neighbor source row/column for each destination index.
fn nearest_indices(in_dim: usize, out_dim: usize) -> Vec<usize> {
    assert!(in_dim >= 1 && out_dim >= 1);
    (0..out_dim)
        .map(|d| {
            let src = libm::floor((d as f64 + 0.5) * in_dim as f64 / out_dim as f64) as usize;
            src.min(in_dim - 1)
        })
        .collect()
}

pub fn resize_label_nearest(label: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let rows = nearest_indices(label.h(), out_h);
    let cols = nearest_indices(label.w(), out_w);
    let mut out = LabelMap::zeros(out_h, out_w);
    for (i, &si) in rows.iter().enumerate() {
        for (j, &sj) in cols.iter().enumerate() {
            out.set(i, j, label.get(si, sj));
        }
    }
    out
}

/// Nearest-neighbor resize of a `[C, H, W]` tensor (image or probability
/// map); every channel uses the same index map as the label resize.
pub fn resize_chw_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(t.rank(), 3, "resize expects [C, H, W]");
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let rows = nearest_indices(h, out_h);
    let cols = nearest_indices(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for (i, &si) in rows.iter().enumerate() {
            for (j, &sj) in cols.iter().enumerate() {
                out.set3(ch, i, j, t.at3(ch, si, sj));
            }
        }
    }
    out
}

pub fn crop_chw(t: &Tensor, bbox: BBox) -> Tensor {
    assert_eq!(t.rank(), 3, "crop expects [C, H, W]");
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    assert!(bbox.top + bbox.h <= h && bbox.left + bbox.w <= w, "crop out of bounds");
    let mut out = Tensor::zeros(&[c, bbox.h, bbox.w]);
    for ch in 0..c {
        for i in 0..bbox.h {
            for j in 0..bbox.w {
                out.set3(ch, i, j, t.at3(ch, bbox.top + i, bbox.left + j));
            }
        }
    }
    out
}

pub fn flip_image(t: &Tensor) -> Tensor {
    assert_eq!(t.rank(), 3, "flip expects [C, H, W]");
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.set3(ch, i, j, t.at3(ch, i, w - 1 - j));
            }
        }
    }
    out
}

pub fn flip_label(l: &LabelMap) -> LabelMap {
    let mut out = LabelMap::zeros(l.h(), l.w());
    for i in 0..l.h() {
        for j in 0..l.w() {
            out.set(i, j, l.get(i, l.w() - 1 - j));
        }
    }
    out
}

/// The two views of one image.
pub struct Views {
    pub bbox: BBox,
    /// Resized crop of the full-image argmax prediction (no gradients ever
    /// flow into this view; it is plain label data).
    pub view1: LabelMap,
    /// Resized image crop that produced view 2; feed this to the model when
    /// gradients are needed.
    pub input2: Tensor,
    /// Model probabilities on `input2`, `[C, H, W]`.
    pub probs2: Tensor,
    /// Argmax of `probs2`.
    pub view2: LabelMap,
}

/// Builds both views for one `[3, H, W]` image. `predict` maps `[3, h, w]`
/// to `[C, h, w]` probabilities and is treated as a black box; when
/// gradients are needed on view 2, rebuild that forward pass on a tape with
/// the same `input2`.
pub fn make_views(
    mut predict: impl FnMut(&Tensor) -> Tensor,
    image: &Tensor,
    rng: &mut Rng,
) -> Views {
    assert_eq!(image.rank(), 3, "image must be [3, H, W]");
    let (h, w) = (image.dim(1), image.dim(2));
    let probs_full = predict(image);
    assert_eq!(probs_full.rank(), 3, "predict must return [C, H, W]");
    assert_eq!(probs_full.dim(1), h);
    assert_eq!(probs_full.dim(2), w);
    let full_argmax = probs_full.argmax_channels();
    let bbox = sample_bbox(h, w, rng);
    let view1 = resize_label_nearest(&full_argmax.crop(bbox.top, bbox.left, bbox.h, bbox.w), h, w);
    let input2 = resize_chw_nearest(&crop_chw(image, bbox), h, w);
    let probs2 = predict(&input2);
    let view2 = probs2.argmax_channels();
    Views { bbox, view1, input2, probs2, view2 }
}
