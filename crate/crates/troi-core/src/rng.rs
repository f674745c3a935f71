//! splitmix64 generator for reproducible synthetic data.
//!
//! Tiny, seedable and platform-stable; statistical quality is more than enough
//! for synthetic feature maps and test probes, and determinism is the point.

/// splitmix64 state. Copy-cheap; streams from the same seed are identical
/// on every platform.
#[derive(Clone, Copy, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [-1, 1).
    #[inline]
    pub fn next_signed_unit(&mut self) -> f64 {
        2.0 * self.next_unit() - 1.0
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_unit() * n as f64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs computed directly from the update constants.
    const SEED0_FIRST4: [u64; 4] = [
        0xE220_A839_7B1D_CDAF,
        0x6E78_9E6A_A1B9_65F4,
        0x06C4_5D18_8009_454F,
        0xF88B_B8A8_724C_81EC,
    ];

    #[test]
    fn seed_zero_matches_reference() {
        let mut rng = SplitMix64::new(0);
        for expect in SEED0_FIRST4 {
            assert_eq!(rng.next_u64(), expect);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitMix64::new(0xDEAD_BEEF);
        let mut b = SplitMix64::new(0xDEAD_BEEF);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge_immediately() {
        let mut a = SplitMix64::new(0);
        let mut b = SplitMix64::new(1);
        let av: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let bv: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert!(av.iter().zip(&bv).all(|(x, y)| x != y));
        // seed 1 first output, computed from the constants
        assert_eq!(bv[0], 0x910A_2DEC_8902_5CC1);
    }

    #[test]
    fn unit_floats_in_range() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..1000 {
            let u = rng.next_unit();
            assert!((0.0..1.0).contains(&u));
            let s = rng.next_signed_unit();
            assert!((-1.0..1.0).contains(&s));
        }
    }
}
