//! Portable seeded randomness.
//!
//! All randomness in the crate comes from xoshiro256** (Blackman & Vigna),
//! seeded from a `u64` through SplitMix64 as implemented by `rand_xoshiro`.
//! The derived draws are defined here rather than through `rand`'s
//! distributions so that their bit patterns are pinned by this crate:
//!
//! * `uniform`: the top 53 bits of one `next_u64`, scaled by 2^-53, in [0, 1).
//! * `normal`: Box-Muller on two uniforms `u1` (mapped to (0, 1]) and `u2`,
//!   returning `r cos(2 pi u2)` first and caching `r sin(2 pi u2)` for the
//!   next call.
//! * `below(n)`: `next_u64 % n` with rejection of the biased tail.
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug)]
pub struct Prng {
    inner: Xoshiro256StarStar,
    spare_normal: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for `(master, tag)`, e.g. one per held-out domain.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let a = splitmix_finalize(master.wrapping_add(0x9E37_79B9_7F4A_7C15));
    splitmix_finalize(a ^ tag.wrapping_mul(0xD605_BBB5_8C8A_BBFD).wrapping_add(tag))
}

/// Child seed from a path of tags.
pub fn derive_seed_path(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(master, |s, &t| derive_seed(s, t))
}
