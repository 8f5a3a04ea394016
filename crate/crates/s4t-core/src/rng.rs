//! Deterministic pseudo-random number generation.
//!
//! SplitMix64 core with explicit stream derivation: every consumer of
//! randomness (per-image crop boxes, per-epoch shuffles, noise fields,
//! weight init) owns its own `Rng` derived from `(seed, labels...)`, so
//! adding or reordering one consumer never perturbs another. That is what
//! makes whole runs bitwise reproducible from a single config seed.

/// SplitMix64 generator. Passes through every 64-bit state exactly once;
/// good enough statistical quality for data synthesis and augmentation.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent stream from this seed and a label path, e.g.
    /// `Rng::stream(seed, &[IMAGE_STREAM, epoch, image_index])`.
    pub fn stream(seed: u64, labels: &[u64]) -> Self {
        let mut r = Rng::new(seed);
        for &l in labels {
            // Mix each label in through the output function so that
            // (seed, [a, b]) and (seed, [b, a]) diverge.
            let mixed = r.next_u64() ^ splitmix(l.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            r = Rng::new(mixed);
        }
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        splitmix(self.state)
    }

    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform integer in [0, n). Uses rejection sampling to stay unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        lo + self.below(hi - lo + 1)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = crate::mathf::sqrt(-2.0 * crate::mathf::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        r * libm::cos(theta)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Samples `count` distinct indices from [0, n) (partial Fisher-Yates).
    pub fn distinct_indices(&mut self, n: usize, count: usize) -> alloc::vec::Vec<usize> {
        assert!(count <= n, "cannot draw {count} distinct from {n}");
        let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used across the crate. Keeping them in one place avoids
/// accidental collisions between consumers.
pub mod streams {
    pub const WEIGHT_INIT: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const DOMAIN: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const CROP: u64 = 5;
    pub const FLIP: u64 = 6;
    pub const ORACLE_NOISE: u64 = 7;
}
