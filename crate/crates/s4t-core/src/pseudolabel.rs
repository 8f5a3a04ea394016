//! Pseudolabel refinement for unreliable pixels: neighborhood interpolation
//! over reliable predictions, plus running class-frequency statistics that
//! drive per-class loss weights.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::mathf;
use crate::tensor::{LabelMap, Mask, Tensor};

// Floor applied to normalized frequencies inside logs.
pub const FREQ_EPS: f64 = 1e-6;

/// Interpolated pseudolabels for unreliable pixels.
///
/// `y_int` and the weights are meaningful only where the source pixel was
/// unreliable and at least one reliable neighbor existed; everywhere else the
/// weight is 0 and the label is a placeholder.
#[derive(Debug, Clone)]
pub struct Interpolation {
    pub y_int: LabelMap,
    n: Vec<u16>,
    weight: Vec<f32>,
    h: usize,
    w: usize,
}

impl Interpolation {
    pub fn weight(&self, i: usize, j: usize) -> f32 {
        self.weight[i * self.w + j]
    }

    pub fn neighbor_count(&self, i: usize, j: usize) -> u16 {
        self.n[i * self.w + j]
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }
}

/// At each unreliable pixel, average the probability vectors of reliable
/// pixels in the k×k window (clipped to bounds) and take the argmax; the
/// weight is the reliable-neighbor count over the fixed denominator k²-1, so
/// border pixels are systematically down-weighted.
pub fn interpolate(r: &Mask, probs2: &Tensor, k: usize) -> Interpolation {
    assert!(k % 2 == 1 && k >= 3, "neighborhood size must be odd and >= 3");
    assert_eq!(probs2.rank(), 3, "interpolate expects [C,H,W] probabilities");
    let (c, h, w) = (probs2.dim(0), probs2.dim(1), probs2.dim(2));
    assert_eq!((r.h(), r.w()), (h, w), "reliability map shape differs from probs");

    let half = k / 2;
    let denom = (k * k - 1) as f32;
    let mut result = Interpolation {
        y_int: LabelMap::zeros(h, w),
        n: alloc::vec![0u16; h * w],
        weight: alloc::vec![0f32; h * w],
        h,
        w,
    };
    let mut acc = alloc::vec![0f64; c];

    for i in 0..h {
        for j in 0..w {
            if r.get(i, j) {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut count = 0u16;
            let i0 = i.saturating_sub(half);
            let i1 = (i + half).min(h - 1);
            let j0 = j.saturating_sub(half);
            let j1 = (j + half).min(w - 1);
            // The centre cell is inside the window but carries r = 0 here,
            // so it never contributes.
            for wi in i0..=i1 {
                for wj in j0..=j1 {
                    if !r.get(wi, wj) {
                        continue;
                    }
                    count += 1;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += probs2.at3(ch, wi, wj) as f64;
                    }
                }
            }
            if count > 0 {
                let mut best = 0usize;
                for (ch, &a) in acc.iter().enumerate().skip(1) {
                    if a > acc[best] {
                        best = ch;
                    }
                }
                result.y_int.set(i, j, best as u8);
            }
            result.n[i * w + j] = count;
            result.weight[i * w + j] = count as f32 / denom;
        }
    }
    result
}

/// Running class-frequency estimate over the last `capacity` batches of hard
/// predicted labels, with the per-class weights lambda_c = -eta * ln q_c that
/// boost rare classes.
#[derive(Debug, Clone)]
pub struct ClassStats {
    history: VecDeque<Vec<u64>>,
    totals: Vec<u64>,
    q: Vec<f32>,
    lambda: Vec<f32>,
    capacity: usize,
    eta: f64,
}

impl ClassStats {
    /// Starts from a uniform frequency estimate until the first observation.
    pub fn new(num_classes: usize, capacity: usize, eta: f64) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        assert!(capacity >= 1, "history capacity must be positive");
        assert!(eta >= 0.0, "damping factor must be non-negative");
        let mut stats = ClassStats {
            history: VecDeque::new(),
            totals: alloc::vec![0u64; num_classes],
            q: Vec::new(),
            lambda: Vec::new(),
            capacity,
            eta,
        };
        stats.recompute();
        stats
    }

    /// Counts this batch's predicted labels into the ring buffer, evicting
    /// the oldest batch once `capacity` is exceeded.
    pub fn observe(&mut self, labels: &[LabelMap]) {
        let c = self.totals.len();
        let mut counts = alloc::vec![0u64; c];
        for lab in labels {
            for &v in lab.data() {
                assert!((v as usize) < c, "label {v} out of range for {c} classes");
                counts[v as usize] += 1;
            }
        }
        for (t, &n) in self.totals.iter_mut().zip(counts.iter()) {
            *t += n;
        }
        self.history.push_back(counts);
        if self.history.len() > self.capacity {
            let evicted = self.history.pop_front().unwrap();
            for (t, n) in self.totals.iter_mut().zip(evicted) {
                *t -= n;
            }
        }
        self.recompute();
    }

    fn recompute(&mut self) {
        let c = self.totals.len();
        let total: u64 = self.totals.iter().sum();
        self.q.clear();
        self.lambda.clear();
        for &n in &self.totals {
            let qc = if total == 0 { 1.0 / c as f64 } else { n as f64 / total as f64 };
            self.q.push(qc as f32);
            self.lambda.push((-self.eta * mathf::ln(qc.max(FREQ_EPS))) as f32);
        }
    }

    /// Normalized prediction frequencies; sums to 1.
    pub fn q(&self) -> &[f32] {
        &self.q
    }

    pub fn lambda(&self) -> &[f32] {
        &self.lambda
    }

    pub fn num_classes(&self) -> usize {
        self.totals.len()
    }

    pub fn batches_seen(&self) -> usize {
        self.history.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn uniform_probs(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::full(&[c, h, w], 1.0 / c as f32)
    }

    fn set_pixel_probs(t: &mut Tensor, i: usize, j: usize, probs: &[f32]) {
        for (ch, &p) in probs.iter().enumerate() {
            t.set3(ch, i, j, p);
        }
    }

    #[test]
    fn fully_reliable_ring_gives_weight_one() {
        let (c, h, w) = (3, 5, 5);
        let mut probs = uniform_probs(c, h, w);
        let r = Mask::from_fn(h, w, |i, j| !(i == 2 && j == 2));
        for i in 1..=3 {
            for j in 1..=3 {
                set_pixel_probs(&mut probs, i, j, &[0.1, 0.7, 0.2]);
            }
        }
        let interp = interpolate(&r, &probs, 3);
        assert_eq!(interp.neighbor_count(2, 2), 8);
        assert_eq!(interp.weight(2, 2), 1.0);
        assert_eq!(interp.y_int.get(2, 2), 1);
    }

    #[test]
    fn isolated_pixel_gets_zero_weight() {
        let (c, h, w) = (3, 5, 5);
        let probs = uniform_probs(c, h, w);
        let r = Mask::zeros(h, w);
        let interp = interpolate(&r, &probs, 3);
        for i in 0..h {
            for j in 0..w {
                assert_eq!(interp.neighbor_count(i, j), 0);
                assert_eq!(interp.weight(i, j), 0.0);
            }
        }
    }

    #[test]
    fn corner_pixel_uses_fixed_denominator() {
        let (c, h, w) = (2, 4, 4);
        let probs = uniform_probs(c, h, w);
        // Everything reliable except the corner: its clipped 2x2 window holds
        // 3 reliable neighbors out of the fixed k^2-1 = 8.
        let r = Mask::from_fn(h, w, |i, j| !(i == 0 && j == 0));
        let interp = interpolate(&r, &probs, 3);
        assert_eq!(interp.neighbor_count(0, 0), 3);
        assert_eq!(interp.weight(0, 0), 3.0 / 8.0);
    }

    #[test]
    fn argmax_ties_break_to_lowest_class() {
        let (c, h, w) = (4, 3, 3);
        let mut probs = Tensor::zeros(&[c, h, w]);
        for i in 0..h {
            for j in 0..w {
                // Classes 1 and 2 exactly tied everywhere.
                set_pixel_probs(&mut probs, i, j, &[0.0, 0.5, 0.5, 0.0]);
            }
        }
        let r = Mask::from_fn(h, w, |i, j| !(i == 1 && j == 1));
        let interp = interpolate(&r, &probs, 3);
        assert_eq!(interp.y_int.get(1, 1), 1);
    }

    #[test]
    #[should_panic(expected = "odd")]
    fn even_window_rejected() {
        let probs = uniform_probs(2, 4, 4);
        interpolate(&Mask::zeros(4, 4), &probs, 4);
    }

    // Literal window transcription: isize coordinates, explicit bounds test,
    // f64 sums, lowest-index argmax.
    fn interpolate_reference(r: &Mask, probs: &Tensor, k: usize) -> (LabelMap, Vec<f32>, Vec<u16>) {
        let (c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2));
        let half = (k / 2) as isize;
        let mut y = LabelMap::zeros(h, w);
        let mut weights = alloc::vec![0f32; h * w];
        let mut counts = alloc::vec![0u16; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                if r.get(i as usize, j as usize) {
                    continue;
                }
                let mut acc = alloc::vec![0f64; c];
                let mut n = 0u16;
                for di in -half..=half {
                    for dj in -half..=half {
                        let (wi, wj) = (i + di, j + dj);
                        if wi < 0 || wi >= h as isize || wj < 0 || wj >= w as isize {
                            continue;
                        }
                        if r.get(wi as usize, wj as usize) {
                            n += 1;
                            for (ch, a) in acc.iter_mut().enumerate() {
                                *a += probs.at3(ch, wi as usize, wj as usize) as f64;
                            }
                        }
                    }
                }
                if n > 0 {
                    let mut best = 0;
                    for ch in 1..c {
                        if acc[ch] > acc[best] {
                            best = ch;
                        }
                    }
                    y.set(i as usize, j as usize, best as u8);
                }
                counts[i as usize * w + j as usize] = n;
                weights[i as usize * w + j as usize] = n as f32 / ((k * k - 1) as f32);
            }
        }
        (y, weights, counts)
    }

    #[test]
    fn interpolation_matches_window_reference() {
        let mut rng = Rng::new(0x1a7e_0001);
        for trial in 0..200 {
            let (c, h, w) = (2 + trial % 6, 16, 16);
            let k = if trial % 2 == 0 { 3 } else { 5 };
            let mut probs = Tensor::zeros(&[c, h, w]);
            for i in 0..h {
                for j in 0..w {
                    let mut vals = alloc::vec![0f32; c];
                    let mut sum = 0.0;
                    for v in vals.iter_mut() {
                        *v = rng.next_f32() + 1e-3;
                        sum += *v;
                    }
                    for (ch, v) in vals.iter().enumerate() {
                        probs.set3(ch, i, j, v / sum);
                    }
                }
            }
            let r = Mask::from_fn(h, w, |_, _| rng.next_f32() < 0.6);
            let interp = interpolate(&r, &probs, k);
            let (y_ref, w_ref, n_ref) = interpolate_reference(&r, &probs, k);
            for i in 0..h {
                for j in 0..w {
                    assert_eq!(interp.neighbor_count(i, j), n_ref[i * w + j], "trial {trial}");
                    assert_eq!(interp.weight(i, j), w_ref[i * w + j], "trial {trial}");
                    if !r.get(i, j) && n_ref[i * w + j] > 0 {
                        assert_eq!(interp.y_int.get(i, j), y_ref.get(i, j), "trial {trial}");
                    }
                }
            }
        }
    }

    #[test]
    fn weights_stay_in_unit_interval() {
        let mut rng = Rng::new(0x1a7e_0002);
        for _ in 0..50 {
            let (c, h, w) = (3, 9, 7);
            let probs = uniform_probs(c, h, w);
            let r = Mask::from_fn(h, w, |_, _| rng.next_f32() < 0.5);
            for k in [3, 5, 7] {
                let interp = interpolate(&r, &probs, k);
                for i in 0..h {
                    for j in 0..w {
                        let wt = interp.weight(i, j);
                        assert!((0.0..=1.0).contains(&wt));
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_labels_give_uniform_weights() {
        let c = 5;
        let mut stats = ClassStats::new(c, 10, 0.5);
        let mut lab = LabelMap::zeros(5, 5);
        for (px, v) in lab.data_mut().iter_mut().enumerate() {
            *v = (px % c) as u8;
        }
        stats.observe(core::slice::from_ref(&lab));
        let expect = 0.5 * mathf::ln(c as f64);
        for (&qc, &lc) in stats.q().iter().zip(stats.lambda()) {
            assert!((qc - 0.2).abs() < 1e-7);
            assert!((lc as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn ring_buffer_evicts_oldest_batch() {
        let mut stats = ClassStats::new(2, 2, 1.0);
        let all_zero = LabelMap::zeros(2, 2);
        let mut all_one = LabelMap::zeros(2, 2);
        all_one.data_mut().fill(1);
        stats.observe(core::slice::from_ref(&all_zero));
        stats.observe(core::slice::from_ref(&all_one));
        assert!((stats.q()[0] - 0.5).abs() < 1e-7);
        // A third batch pushes the all-zero batch out of the window.
        stats.observe(core::slice::from_ref(&all_one));
        assert_eq!(stats.q()[0], 0.0);
        assert_eq!(stats.q()[1], 1.0);
        assert_eq!(stats.batches_seen(), 2);
    }

    #[test]
    fn skewed_counts_give_log_inverse_weights() {
        let mut stats = ClassStats::new(2, 5, 0.5);
        let mut lab = LabelMap::zeros(10, 10);
        for (px, v) in lab.data_mut().iter_mut().enumerate() {
            *v = if px < 90 { 0 } else { 1 };
        }
        stats.observe(core::slice::from_ref(&lab));
        assert!((stats.q()[0] - 0.9).abs() < 1e-7);
        assert!((stats.q()[1] - 0.1).abs() < 1e-7);
        assert!((stats.lambda()[0] - 0.052_680_258).abs() < 1e-6);
        assert!((stats.lambda()[1] - 1.151_292_5).abs() < 1e-6);
    }

    #[test]
    fn unseen_class_weight_saturates_at_frequency_floor() {
        let mut stats = ClassStats::new(3, 5, 0.5);
        let lab = LabelMap::zeros(4, 4);
        stats.observe(core::slice::from_ref(&lab));
        assert_eq!(stats.q()[1], 0.0);
        let cap = -0.5 * mathf::ln(FREQ_EPS);
        assert!((stats.lambda()[1] as f64 - cap).abs() < 1e-5);
    }

    #[test]
    fn weights_are_permutation_equivariant_and_monotone() {
        let mut rng = Rng::new(0x1a7e_0003);
        for _ in 0..100 {
            let c = 4;
            let mut stats_a = ClassStats::new(c, 3, 0.5);
            let mut stats_b = ClassStats::new(c, 3, 0.5);
            // b sees the same labels with classes relabeled by a fixed cycle.
            let perm = [2u8, 0, 3, 1];
            let mut lab = LabelMap::zeros(6, 6);
            for v in lab.data_mut().iter_mut() {
                *v = rng.below(c as u64) as u8;
            }
            let mut lab_p = lab.clone();
            for v in lab_p.data_mut().iter_mut() {
                *v = perm[*v as usize];
            }
            stats_a.observe(core::slice::from_ref(&lab));
            stats_b.observe(core::slice::from_ref(&lab_p));
            for cls in 0..c {
                assert_eq!(stats_a.lambda()[cls], stats_b.lambda()[perm[cls] as usize]);
            }
            for a in 0..c {
                for b in 0..c {
                    if stats_a.q()[a] < stats_a.q()[b] {
                        assert!(stats_a.lambda()[a] >= stats_a.lambda()[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn q_sums_to_one_after_observations() {
        let mut rng = Rng::new(0x1a7e_0004);
        let mut stats = ClassStats::new(6, 4, 0.5);
        for _ in 0..20 {
            let mut lab = LabelMap::zeros(8, 8);
            for v in lab.data_mut().iter_mut() {
                *v = rng.below(6) as u8;
            }
            stats.observe(core::slice::from_ref(&lab));
            let sum: f64 = stats.q().iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
