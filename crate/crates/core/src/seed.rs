//! Derivation of per-component seeds from one global seed.
//!
//! `derive_seed(global, name) = splitmix64(global ^ fnv1a64(name))`. Each
//! subsystem draws from its own named stream, so adding randomness in one
//! place does not shift any other stream.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(global: u64, component: &str) -> u64 {
    splitmix64(global ^ fnv1a64(component))
}

/// Seed for the `index`-th draw of a component (e.g. one sample per prompt).
pub fn derive_indexed(global: u64, component: &str, index: u64) -> u64 {
    splitmix64(derive_seed(global, component) ^ splitmix64(index))
}
