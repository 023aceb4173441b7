//! Small text utilities shared by the retrieval and evaluation code.

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace token count, the unit used for query token budgets.
pub fn whitespace_len(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercase, drop every non-alphanumeric non-whitespace char, split on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Normalization used for exact-duplicate detection: lowercase, collapse
/// whitespace, strip terminal punctuation.
pub fn normalize_for_dedup(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn dedup_normalization() {
        assert_eq!(normalize_for_dedup("A."), "a");
        assert_eq!(normalize_for_dedup("  The   Cat sat!? "), "the cat sat");
    }

    #[test]
    fn metric_tokenization_strips_punctuation() {
        assert_eq!(metric_tokens("The cat, sat."), vec!["the", "cat", "sat"]);
        assert!(metric_tokens("?!").is_empty());
    }
}
