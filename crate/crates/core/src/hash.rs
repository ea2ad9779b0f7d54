//! Counter-based hashing used to realise random fields without stored state.

/// 64-bit finalizer from splitmix64.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a seed, a stream tag and up to two lattice indices.
pub fn hash_cell(seed: u64, tag: u64, i: i64, j: i64) -> u64 {
    let mut h = mix64(seed ^ 0x5851_F42D_4C95_7F2D);
    h = mix64(h ^ tag);
    h = mix64(h ^ i as u64);
    mix64(h ^ (j as u64).rotate_left(32))
}

/// Uniform number in (0, 1] from the top 53 bits.
pub fn unit_open(h: u64) -> f64 {
    ((h >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Tag derived from a short ASCII label, for separating random streams.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_open_range() {
        assert!(unit_open(0) > 0.0);
        assert_eq!(unit_open(u64::MAX), 1.0);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(hash_cell(1, tag("a"), 0, 0), hash_cell(1, tag("b"), 0, 0));
        assert_ne!(hash_cell(1, 0, 1, 0), hash_cell(1, 0, 0, 1));
        assert_ne!(hash_cell(1, 0, 0, 0), hash_cell(2, 0, 0, 0));
    }
}
