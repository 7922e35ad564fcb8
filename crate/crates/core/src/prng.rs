//! Counter-based pseudorandom generator.
//!
//! The n-th output of a stream keyed by `seed` is
//!
//! ```text
//! out(n) = mix64(key + (n + 1) * GAMMA),   key = mix64(seed ^ SEED_SALT)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer (Stafford variant 13) and
//! `GAMMA` is the 64-bit golden-ratio increment. Because every output is a
//! pure function of `(seed, counter)`, a stream can be replayed from any
//! position and independent streams can be derived with [`Prng::split`]
//! without any sequencing between them. All arithmetic is wrapping `u64`, so
//! results are identical on every platform.

use rand_core::RngCore;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SEED_SALT: u64 = 0x6A09_E667_F3BC_C909;
const SPLIT_SALT: u64 = 0xBB67_AE85_84CA_A73B;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    seed: u64,
    counter: u64,
    key: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    /// Stream `seed` positioned so the next output is `out(counter)`.
    pub fn at(seed: u64, counter: u64) -> Self {
        Self {
            seed,
            counter,
            key: mix64(seed ^ SEED_SALT),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent stream. Depends only on `(seed, stream)`, not on
    /// how far this generator has advanced.
    pub fn split(&self, stream: u64) -> Prng {
        Prng::new(mix64(self.key ^ mix64(stream.wrapping_add(SPLIT_SALT))))
    }

    #[inline]
    pub fn next_u64_raw(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1], safe for `ln`.
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        loop {
            let x = self.next_u64_raw();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n || lo >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(self)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for Prng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_u64_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
