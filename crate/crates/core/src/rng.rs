//! Counter-based pseudo-random stream.
//!
//! Draw `n` is a pure function of `(seed, n)`, so any `(seed, position)`
//! pair replays identically and substreams can be split off without
//! touching the parent's future output.

use crate::math;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random stream with an explicit position counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Rebuild a stream at an exact point; draws from here replay.
    pub fn at(seed: u64, position: u64) -> Self {
        RngState { seed, position }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        mix(self.seed.wrapping_add(self.position.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in (0, 1]; used where an open lower bound matters.
    pub fn next_f32_open0(&mut self) -> f32 {
        1.0 - self.next_f32()
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f32 {
        let u1 = self.next_f32_open0();
        let u2 = self.next_f32();
        let r = math::sqrt(-2.0 * math::ln(u1));
        r * math::cos(2.0 * core::f32::consts::PI * u2)
    }

    /// Gumbel(0, 1) noise.
    pub fn next_gumbel(&mut self) -> f32 {
        let u = self.next_f32_open0();
        let inner = (-math::ln(u)).max(f32::MIN_POSITIVE);
        -math::ln(inner)
    }

    /// Derive an independent substream and advance this one by a single
    /// draw, so parent and child never overlap.
    pub fn split(&mut self) -> RngState {
        let child_seed = mix(self.seed ^ self.next_u64().rotate_left(17));
        RngState::new(child_seed)
    }
}
