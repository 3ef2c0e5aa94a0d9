//! Counter-based pseudo-random generator.
//!
//! All randomness in the crate (weight init, epoch shuffling, dropout masks,
//! attack-set sampling, synthetic data) flows through [`CounterRng`], a keyed
//! SplitMix64 counter generator:
//!
//! ```text
//! key       = mix(seed ^ mix(stream ^ 0x6a09e667f3bcc909))
//! output(i) = mix(key + i * 0x9e3779b97f4a7c15)        // i = 1, 2, 3, …
//! mix(z)    = SplitMix64 finalizer
//!             (z ^= z>>30; z *= 0xbf58476d1ce4e5b9;
//!              z ^= z>>27; z *= 0x94d049bb133111eb; z ^= z>>31)
//! ```
//!
//! The i-th output is a pure function of `(seed, stream, i)`, so independent
//! consumers can be given independent streams without sharing state. Stream
//! ids used by the crate are built with [`stream`].

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;
const STREAM_SALT: u64 = 0x6a09e667f3bcc909;

/// Builds a stream id from a purpose tag and an index (layer, epoch, step…).
#[inline]
pub fn stream(purpose: StreamPurpose, index: u64) -> u64 {
    ((purpose as u64) << 56) ^ index
}

#[derive(Debug, Clone, Copy)]
#[repr(u8)]
pub enum StreamPurpose {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    AttackSet = 4,
    EvalSubsample = 5,
    Synthetic = 6,
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
    /// Spare normal deviate from the last Box–Muller pair.
    spare: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: mix(seed ^ mix(stream ^ STREAM_SALT)),
            ctr: 0,
            spare: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate (Box–Muller, pair cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Unbiased integer in [0, n) via 128-bit multiply.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn without replacement from [0, n).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher–Yates: position i receives a uniform pick from [i, n).
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
