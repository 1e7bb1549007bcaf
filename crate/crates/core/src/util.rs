//! Formatting and hashing helpers shared by logs, manifests and checksums.

use sha2::{Digest, Sha256};

/// Format a metric with 10 significant digits, enough to reconstruct the
/// value from text far beyond any tolerance used in this workspace.
pub fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.9e}")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_text_has_at_least_nine_significant_digits() {
        let s = fmt_metric(15.654321987654);
        assert_eq!(s, "1.565432199e1");
        let parsed: f64 = s.parse().unwrap();
        assert!((parsed - 15.654321987654).abs() < 1e-8);
    }

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
