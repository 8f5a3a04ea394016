//! Dense row-major f32 tensors plus the small integer map types that ride
//! alongside them (hard label maps, boolean masks).
//!
//! Layout conventions used throughout the crate:
//! - images and activations: `[N, C, H, W]`
//! - per-image probability maps: `[C, H, W]`, channels sum to 1 per pixel
//! - scalars: rank 0, one element

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} wants {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    #[inline]
    pub fn idx4(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + i) * self.shape[3] + j
    }

    #[inline]
    pub fn idx3(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + i) * self.shape[2] + j
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.idx4(n, c, i, j)]
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.idx3(c, i, j)]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f32) {
        let k = self.idx3(c, i, j);
        self.data[k] = v;
    }

    pub fn set4(&mut self, n: usize, c: usize, i: usize, j: usize, v: f32) {
        let k = self.idx4(n, c, i, j);
        self.data[k] = v;
    }

    /// The `[C, H, W]` slice of batch entry `n` of an `[N, C, H, W]` tensor.
    pub fn batch_entry(&self, n: usize) -> Tensor {
        assert_eq!(self.rank(), 4);
        let size = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor::from_vec(
            &[self.shape[1], self.shape[2], self.shape[3]],
            self.data[n * size..(n + 1) * size].to_vec(),
        )
    }

    /// Stacks per-image `[C, H, W]` tensors into one `[N, C, H, W]` batch.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let shape = items[0].shape();
        assert_eq!(shape.len(), 3, "stack expects [C, H, W] items");
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape(), shape, "stack with mismatched shapes");
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[items.len(), shape[0], shape[1], shape[2]], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel argmax over channels of a `[C, H, W]` probability or logit
    /// map. Ties break toward the lowest channel index.
    pub fn argmax_channels(&self) -> LabelMap {
        assert_eq!(self.rank(), 3, "argmax_channels expects [C, H, W]");
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(c >= 1);
        let mut out = LabelMap::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                let mut best_v = self.at3(0, i, j);
                for ch in 1..c {
                    let v = self.at3(ch, i, j);
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out.set(i, j, best as u8);
            }
        }
        out
    }

    /// FNV-1a over the little-endian byte image; for bitwise change checks.
    pub fn bytes_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }
}

/// Hard per-pixel class labels, row-major `H x W`. Classes fit in u8; the
/// image codecs cap class counts at 256 anyway.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        LabelMap { h, w, data: vec![0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "label map {h}x{w} wants {} bytes", h * w);
        LabelMap { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.data[i * self.w + j] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Crops rows [top, top+bh) x cols [left, left+bw).
    pub fn crop(&self, top: usize, left: usize, bh: usize, bw: usize) -> LabelMap {
        assert!(top + bh <= self.h && left + bw <= self.w, "crop out of bounds");
        let mut out = LabelMap::zeros(bh, bw);
        for i in 0..bh {
            for j in 0..bw {
                out.set(i, j, self.get(top + i, left + j));
            }
        }
        out
    }
}

/// Boolean per-pixel mask, row-major `H x W` (1 = set).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                if f(i, j) {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j] != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.w + j] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "shape")]
    fn from_vec_rejects_wrong_length() {
        let _ = Tensor::from_vec(&[2, 3], vec![1.0; 5]);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as f32).collect());
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 1), 1.0);
        assert_eq!(t.at3(0, 1, 0), 2.0);
        assert_eq!(t.at3(1, 0, 0), 4.0);
        assert_eq!(t.at3(1, 1, 1), 7.0);
    }

    #[test]
    fn stack_then_batch_entry_round_trips() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.batch_entry(0), a);
        assert_eq!(s.batch_entry(1), b);
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![0.4, 0.1, 0.4, 0.8, 0.2, 0.1]);
        let l = t.argmax_channels();
        assert_eq!(l.get(0, 0), 0, "tie between class 0 and 1 goes to 0");
        assert_eq!(l.get(0, 1), 1);
    }

    #[test]
    fn label_crop_matches_manual_window() {
        let m = LabelMap::from_vec(3, 3, vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
        let c = m.crop(1, 1, 2, 2);
        assert_eq!(c.data(), &[4, 5, 7, 8]);
    }

    #[test]
    fn digest_differs_on_single_bit_change() {
        let a = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut b = a.clone();
        b.data_mut()[2] = 3.0000002;
        assert_ne!(a.bytes_digest(), b.bytes_digest());
        assert_eq!(a.bytes_digest(), a.clone().bytes_digest());
    }

    #[test]
    fn mask_count_and_from_fn() {
        let m = Mask::from_fn(4, 4, |i, j| (i + j) % 2 == 0);
        assert_eq!(m.count(), 8);
        assert!(m.get(0, 0));
        assert!(!m.get(0, 1));
    }
}
