//! Deterministic sub-seed derivation.

/// Mixes `base` with a sequence of tags into an independent 64-bit seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    for &t in tags {
        state = splitmix(state ^ splitmix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_change_the_seed() {
        assert_eq!(derive(1, &[2, 3]), derive(1, &[2, 3]));
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[2]));
        assert_ne!(derive(0, &[]), derive(0, &[0]));
    }
}
