//! Seeded, platform-stable random number generation.
//!
//! The generator is SplitMix64: a counter-based generator whose state is a
//! single 64-bit word advanced by the golden-ratio increment. Every scalar in
//! the stream is a pure function of (seed, draw index), so identical seeds
//! reproduce identical streams on every platform. Normal variates come from
//! the Box-Muller transform over the uniform stream; `libm` supplies the
//! transcendental functions so the bits do not depend on the host libm.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

/// Deterministic stream of uniforms and Box-Muller normals.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Second half of the most recent Box-Muller pair, if unused.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, spare_normal: None }
    }

    /// Derives an independent stream from a parent seed and a lane index.
    ///
    /// Used for per-sample / per-step seeding so that work items can be
    /// generated in any order while keeping the overall run replayable.
    pub fn derive(seed: u64, lane: u64) -> Self {
        let mut r = Rng::new(seed ^ mix64(lane.wrapping_add(GOLDEN_GAMMA)));
        // burn one output so lane 0 does not alias the parent stream
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in the half-open interval [0, 1), with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Uniform integer in [0, bound) by rejection-free multiply-shift.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(MIX_A);
    x = (x ^ (x >> 27)).wrapping_mul(MIX_B);
    x ^ (x >> 31)
}
