use sha2::{Digest, Sha256};

/// Stable 64-bit seed derived from a base seed and a string key.
///
/// Used wherever per-record randomness must not depend on iteration order or scheduling.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Short hex digest of arbitrary bytes, for config and checkpoint fingerprints.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
