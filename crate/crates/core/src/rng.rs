//! Counter-derived random streams.
//!
//! Every stream is keyed by `(seed, a, b)` so that draws do not depend on
//! evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes three counters into one 64-bit key.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17))
}

/// Stream for `(seed, a, b)`.
pub fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(1, 2, 3).random();
        let b: u64 = stream(1, 2, 3).random();
        let c: u64 = stream(1, 3, 2).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
