//! Seed splitting.
//!
//! Every random stream in a run descends from one master seed through
//! [`derive_seed`]: `child = mix(mix(parent ^ fnv1a(label)) + index)`, where
//! `mix` is the SplitMix64 finalizer. A child depends only on its parent,
//! label and index, so adding replicates or stages never perturbs existing
//! streams.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 output function.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    mix(mix(parent ^ fnv1a(label)).wrapping_add(index))
}
