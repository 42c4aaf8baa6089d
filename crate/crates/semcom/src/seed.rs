//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a user-supplied base seed
//! through [`derive_seed`], so reruns with the same seed reproduce results
//! bit-for-bit on one platform. The mixer is the splitmix64 finalizer; it is
//! a stream separator, not a cryptographic primitive.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of tag/index parts.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x6a09_e667_f3bc_c908);
    for &p in parts {
        state = mix(state.wrapping_add(p.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(1));
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_paths_distinct_seeds() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[2, 1]);
        let c = derive_seed(7, &[1, 2, 0]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, &[1, 2]));
    }
}
