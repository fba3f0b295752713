//! Seed derivation helpers.
//!
//! All stochastic stages take explicit u64 seeds; sub-seeds are derived
//! with splitmix64 so that adjacent streams (epoch 0/1, view 0/1, ...)
//! decorrelate even though the inputs differ by one bit.

/// One splitmix64 step.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a base seed and a stream tag.
pub fn mix(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}
