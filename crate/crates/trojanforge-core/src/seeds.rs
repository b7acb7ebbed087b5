//! Deterministic seed derivation for independent RNG streams.
//!
//! Every random choice in a pipeline (weight init, poisoning selection,
//! probe draws, batch shuffles) gets its own stream derived from one master
//! seed, so subsystems can be reordered or skipped without perturbing each
//! other's randomness.

/// Derives a child seed from a master seed, a purpose tag, and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer for mixing.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut x = master ^ h ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D049BB133111EB);
    x ^= x >> 31;
    x
}
