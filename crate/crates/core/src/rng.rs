//! Deterministic pseudo-random source.
//!
//! Every stochastic quantity in the crate flows from this generator, so runs
//! are reproducible bit-for-bit from a single 64-bit seed on any platform.
//!
//! Generator: xoshiro256++ (Blackman & Vigna), state seeded from the user
//! seed via four rounds of splitmix64. Uniform f64 takes the top 53 bits of
//! the next output; normals come from the Box-Muller transform on two
//! uniforms (pairs are generated together, the second draw is cached).

/// splitmix64 step: advances `state` and returns the mixed output.
/// Constants are the reference ones: increment 0x9E3779B97F4A7C15,
/// multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from `(seed, tag)`.
///
/// Used to split one experiment seed into per-run / per-step / per-purpose
/// sub-seeds: `derive_seed(s, t) = splitmix64(s ^ splitmix64(t))`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut s = tag;
    let mixed = splitmix64(&mut s);
    let mut t = seed ^ mixed;
    splitmix64(&mut t)
}

/// xoshiro256++ stream with Box-Muller normal sampling.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, cached_normal: None }
    }

    /// Next raw 64-bit output (xoshiro256++ scrambler: rotl(s0+s3,23)+s0).
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_f32(&mut self) -> f32 {
        self.uniform_f64() as f32
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, bound) by rejection-free 128-bit multiply.
    pub fn uniform_usize(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "uniform_usize bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; draws come in deterministic pairs.
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0,1]: avoids ln(0).
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    #[inline]
    pub fn normal_f32(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    /// Vector of standard normals (f32).
    pub fn normal_vec(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.normal_f32()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge_quickly() {
        for seed in [0u64, 1, 2, 99, u64::MAX] {
            let mut a = Rng::new(seed);
            let mut b = Rng::new(seed.wrapping_add(1));
            let diverged = (0..10).any(|_| a.next_u64() != b.next_u64());
            assert!(diverged, "seeds {seed} and {} agree on 10 draws", seed.wrapping_add(1));
        }
    }

    #[test]
    fn normal_moments_match_standard_gaussian() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..n {
            let z = rng.normal_f64();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn uniform_usize_covers_range() {
        let mut rng = Rng::new(5);
        let mut seen = [false; 7];
        for _ in 0..500 {
            seen[rng.uniform_usize(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn derive_seed_is_stable_and_spread() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
    }
}
