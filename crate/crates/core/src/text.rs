//! Tokenization and content digests shared by retrieval, the buyer memory
//! and the prompt gateway.

use sha2::{Digest, Sha256};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Digest of a passage body, used to remember rejected content without keeping it.
pub fn content_digest(content: &str) -> String {
    sha256_hex(content.as_bytes())
}
