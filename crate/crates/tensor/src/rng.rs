//! Counter-based random numbers: every draw is a pure function of its key.

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x243F_6A88_85A3_08D3, |acc, &w| {
        splitmix64(acc ^ splitmix64(w))
    })
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn uniform(key: u64, counter: u64) -> f64 {
    let bits = splitmix64(key ^ splitmix64(counter));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_keyed_and_in_range() {
        let k = mix(&[1, 2, 3]);
        assert_ne!(k, mix(&[1, 2, 4]));
        let draws: Vec<f64> = (0..10_000).map(|i| uniform(k, i)).collect();
        assert!(draws.iter().all(|&u| (0.0..1.0).contains(&u)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert_eq!(uniform(k, 7), uniform(k, 7));
    }
}
