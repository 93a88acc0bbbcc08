//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a single global seed through
//! [`derive_seed`], which mixes the seed with a list of integer tags
//! (domain, repetition, modality, ...). Derived seeds key a counter-based
//! ChaCha stream, so identical (seed, tags) always reproduce the same
//! draws regardless of what else ran before.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags used when deriving sub-seeds. Kept in one place so the
/// derivation scheme is auditable and stable across versions.
pub mod tags {
    pub const SKETCH_PARAMS: u64 = 0x01;
    pub const SYNTH_LATENT: u64 = 0x10;
    pub const SYNTH_PRIVATE_LATENT: u64 = 0x11;
    pub const SYNTH_MAP: u64 = 0x12;
    pub const SYNTH_SAMPLE: u64 = 0x13;
    pub const SYNTH_DISTORT: u64 = 0x14;
    pub const SYNTH_DISTORT_NOISE: u64 = 0x15;
    pub const COMPOSE: u64 = 0x20;
    pub const MODEL_INIT: u64 = 0x30;
    pub const TRAIN_SHUFFLE: u64 = 0x31;
    pub const TRAIN: u64 = 0x32;
    pub const EXPERIMENT_REP: u64 = 0x40;
    pub const EXPERIMENT_DATA: u64 = 0x41;
    pub const EXPERIMENT_COMPOSE_TRAIN: u64 = 0x42;
    pub const EXPERIMENT_COMPOSE_TEST: u64 = 0x43;
    pub const EXPERIMENT_UNIMODAL: u64 = 0x44;
    pub const EXPERIMENT_METHOD: u64 = 0x45;
    pub const GRADCHECK: u64 = 0x50;
    pub const BENCH: u64 = 0x51;
    pub const TRAIN_POOL: u64 = 0x60;
    pub const TEST_POOL: u64 = 0x61;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `seed` with a sequence of tags into an independent sub-seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x6175_7261_6c69_7321);
    for &tag in path {
        state = splitmix64(state ^ splitmix64(tag));
    }
    state
}

/// Counter-based generator keyed by (seed, path).
pub fn rng_from(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stable 64-bit tag for a string label (FNV-1a).
pub fn hash_tag(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable tag for a signed subject id.
pub fn subject_tag(subject: i64) -> u64 {
    splitmix64(subject as u64 ^ 0x7375_626a_6563_7400)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_deterministic_and_tag_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2, 3]), derive_seed(7, &[1, 2, 3]));
        assert_ne!(derive_seed(7, &[1, 2, 3]), derive_seed(7, &[1, 3, 2]));
        assert_ne!(derive_seed(7, &[1, 2, 3]), derive_seed(8, &[1, 2, 3]));
        assert_ne!(derive_seed(7, &[]), derive_seed(7, &[0]));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let a: Vec<u64> = rng_from(42, &[tags::COMPOSE, 5])
            .sample_iter(rand::distr::StandardUniform)
            .take(8)
            .collect();
        let b: Vec<u64> = rng_from(42, &[tags::COMPOSE, 5])
            .sample_iter(rand::distr::StandardUniform)
            .take(8)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn hash_tag_distinguishes_labels() {
        assert_ne!(hash_tag("concat"), hash_tag("bilinear"));
        assert_eq!(hash_tag("concat"), hash_tag("concat"));
    }
}
