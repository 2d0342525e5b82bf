//! Seed-stable hashing and seed derivation.
//!
//! Used wherever a value must hash identically across runs, platforms, and
//! toolchain versions; std's hasher guarantees none of that.

/// FNV-1a over the byte string.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One splitmix64 step: advances `state` and returns the next value.
/// The standard finalizer; good enough to derive independent sub-seeds.
pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the `index`-th sub-seed of `base` (splitmix64 stream position).
pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    let mut state = base;
    let mut out = 0;
    for _ in 0..=index {
        out = splitmix64(&mut state);
    }
    out
}
