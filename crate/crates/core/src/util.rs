use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Derives an independent per-item seed from a master seed (SplitMix64 finalizer).
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed-point decimal with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig6(0.00096), "0.000960000");
        assert_eq!(fmt_sig6(0.001), "0.00100000");
        assert_eq!(fmt_sig6(1234.5678), "1234.57");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(-2.5), "-2.50000");
    }

    #[test]
    fn seeds_differ_per_index() {
        assert_ne!(split_seed(1, 0), split_seed(1, 1));
        assert_eq!(split_seed(5, 3), split_seed(5, 3));
    }
}
