//! Counter-based random streams.
//!
//! Every random draw in the crate comes from an [`RngStream`] keyed by
//! `(seed, purpose, cycle, sample)`. The n-th output of a stream is a pure
//! function of those fields and `n`, so scoring can run in any order (or in
//! parallel) without perturbing results.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. Distinct purposes never share outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Purpose {
    CutoutScore = 1,
    CutmixScore = 2,
    CutoutTrain = 3,
    CutmixTrain = 4,
    RandomScore = 5,
    InitialPool = 6,
    PoolSubset = 7,
    Shuffle = 8,
    PadCropFlip = 9,
    ModelInit = 10,
    Synth = 11,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    purpose: Purpose,
    cycle: u64,
    sample: u64,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose, cycle: u64, sample: u64) -> Self {
        let mut key = mix64(seed ^ GOLDEN);
        key = mix64(key ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        key = mix64(key ^ cycle.wrapping_mul(0xA076_1D64_78BD_642F));
        key = mix64(key ^ sample.wrapping_mul(0xE703_7ED1_A0B4_28DB));
        RngStream {
            seed,
            purpose,
            cycle,
            sample,
            key,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn sample(&self) -> u64 {
        self.sample
    }

    /// Number of 64-bit draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased (Lemire's method with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            let low = m as u64;
            if low >= n || low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `items`, drawn uniformly without replacement,
    /// in draw order.
    pub fn sample_without_replacement<T: Copy>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut pool = items.to_vec();
        let k = k.min(pool.len());
        for i in 0..k {
            let j = i + self.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Packs an epoch and a dataset index into one `sample` key.
pub fn epoch_sample(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}
