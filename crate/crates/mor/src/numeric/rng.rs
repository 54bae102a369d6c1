/// Deterministic pseudo-random generator (SplitMix64).
///
/// The generator is a counter stepped by the 64-bit golden ratio and passed
/// through a two-round xor-multiply finalizer, so its entire state is a single
/// `u64`. That makes it trivially checkpointable and guarantees identical
/// streams across platforms for a given seed, which is what every reproducible
/// path in this crate (degradation sampling, weight init, training batches)
/// relies on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer: bijective avalanche mix of a 64-bit word.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    /// Derive an independent child generator from a seed and a stream tag.
    ///
    /// The tag is avalanche-mixed before being combined with the seed, so
    /// consecutive tags (0, 1, 2, ...) yield unrelated streams. Used to give
    /// every training iteration, dataset item, and degradation stage its own
    /// generator without threading mutable state around.
    pub fn stream(seed: u64, tag: u64) -> Self {
        SeededRng::new(seed.wrapping_add(mix(tag ^ GOLDEN_GAMMA)))
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    /// Rebuild a generator from a checkpointed state.
    pub fn from_state(state: u64) -> Self {
        SeededRng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is empty");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Bernoulli draw with probability `p` of `true`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Gaussian draw with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        use rand_distr::Distribution;
        rand_distr::Normal::new(mean, std)
            .expect("normal requires finite std >= 0")
            .sample(self)
    }

    /// Poisson draw. `lambda <= 0` returns 0, matching the limit distribution.
    pub fn poisson(&mut self, lambda: f64) -> f64 {
        use rand_distr::Distribution;
        if lambda <= 0.0 {
            return 0.0;
        }
        rand_distr::Poisson::new(lambda)
            .expect("poisson requires finite positive lambda")
            .sample(self)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl rand::RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        (SeededRng::next_u64(self) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        SeededRng::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = SeededRng::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
