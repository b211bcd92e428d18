//! Counter-based seed derivation so that every run's random stream depends
//! only on the master seed and its position, never on scheduling.

/// SplitMix64 finalizer applied to `seed` combined with `stream`.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of a family identified by `tag`.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed, tag), index)
}
