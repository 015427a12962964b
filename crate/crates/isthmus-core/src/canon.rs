//! Canonical JSON serialization and stable content hashing.
//!
//! Every hashed artifact (archive lines, payload identities, signature
//! fingerprints) goes through the same canonical form: object keys sorted,
//! no insignificant whitespace. Hashes are therefore stable across
//! platforms and serialization round-trips.

use serde_json::Value;

/// Serialize a JSON value in canonical form: keys sorted, compact.
///
/// `serde_json::Map` is backed by a `BTreeMap` (the `preserve_order`
/// feature is off), so recursive key ordering falls out of plain
/// compact serialization.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(value).expect("JSON value serialization cannot fail")
}

/// 64-bit FNV-1a over a byte slice.
///
/// Chosen over a cryptographic digest because the contract asks for a
/// compact 64-bit identity, not tamper resistance beyond bit flips; the
/// function is fully specified here so hashes never drift between builds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// Content hash of a JSON document: FNV-1a over its canonical form.
pub fn content_hash(value: &Value) -> u64 {
    fnv1a64(canonical_json(value).as_bytes())
}

/// Fixed-width lowercase hex rendering of a content hash.
pub fn format_hash(hash: u64) -> String {
    format!("{hash:016x}")
}

/// Parse a hash previously rendered by [`format_hash`].
pub fn parse_hash(text: &str) -> Option<u64> {
    if text.len() != 16 {
        return None;
    }
    u64::from_str_radix(text, 16).ok()
}
