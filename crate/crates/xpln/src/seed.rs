//! Seed derivation. Every random stream in the crate is keyed by the master
//! seed plus a few context words (epoch, sample index, purpose tag), so any
//! point in a run can be reproduced — and resumed — without serializing
//! generator state.

/// 64-bit finalizer with good avalanche behavior.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Fold context words into a master seed, one at a time.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut acc = mix(master);
    for &t in tags {
        acc = mix(acc ^ t);
    }
    acc
}

/// Purpose tags keeping unrelated streams disjoint even for equal indices.
pub mod stream {
    pub const SYNTH: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SPLIT: u64 = 5;
}
