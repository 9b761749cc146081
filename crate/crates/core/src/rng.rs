//! Counter-based random numbers.
//!
//! Every environment draw is a pure function of `(seed, r, x, lane)`, so
//! the environment never has to be stored and any worker can regenerate
//! any row. The mixer is the SplitMix64 finalizer applied to a folded key.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a four-word key.
#[inline]
pub fn hash4(seed: u64, r: u64, x: i64, lane: u64) -> u64 {
    hash_site(hash_time(seed, r), x, lane)
}

/// The `(seed, r)` part of [`hash4`], shared by all sites of a time slice.
#[inline]
pub fn hash_time(seed: u64, r: u64) -> u64 {
    let h = mix64(seed.wrapping_add(GOLDEN));
    mix64(h ^ r.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019))
}

#[inline]
pub fn hash_site(time: u64, x: i64, lane: u64) -> u64 {
    let h = mix64(time ^ (x as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93).wrapping_add(GOLDEN));
    mix64(h ^ lane.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Uniform on [0, 1) with 53 bits of resolution.
#[inline]
pub fn to_unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn env_uniform(seed: u64, r: u64, x: i64, lane: u64) -> f64 {
    to_unit(hash4(seed, r, x, lane))
}

/// Derives the seed of replica `index` from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(mix64(base ^ 0x5851_F42D_4C95_7F2D).wrapping_add(index.wrapping_mul(GOLDEN)))
}
