use sha2::{Digest, Sha256};

/// Derives an independent 64-bit seed from a parent seed and a label, so
/// that adding new consumers never perturbs existing streams.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
