//! Seeded randomness. Every consumer draws from its own ChaCha stream derived
//! from one user seed, so results do not depend on thread count or call order
//! across unrelated components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    /// Degradation sample `i` uses `SYNTH_BASE + i`.
    pub const SYNTH_BASE: u64 = 1 << 32;
    /// Procedural clean scene `i` uses `SCENE_BASE + i`.
    pub const SCENE_BASE: u64 = 1 << 33;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, 1).random();
        let b: u64 = stream(7, 1).random();
        let c: u64 = stream(7, 2).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
