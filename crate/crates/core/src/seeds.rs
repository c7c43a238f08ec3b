//! Seed fan-out: every component derives its own stream from the master seed.

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Child seed for `tag` under `parent`.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag))
}

/// Named component streams of a run.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BASELINE: u64 = 3;
    pub const SEARCH: u64 = 4;
    pub const ADMM: u64 = 5;
    pub const PURIFY: u64 = 6;
    pub const SCRATCH: u64 = 7;

    /// Tag for component `base` in round `round`.
    pub fn round(base: u64, round: usize) -> u64 {
        base << 32 | round as u64
    }
}
