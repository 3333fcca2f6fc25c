//! Tokenization and token hashing shared by the lexical index and the encoder.

/// FNV-1a 64-bit offset basis.
pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
/// FNV-1a 64-bit prime.
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Lowercases `text` and splits it on every non-alphanumeric character,
/// dropping empty pieces.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// FNV-1a over the UTF-8 bytes of `token`.
pub fn fnv1a64(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET_BASIS, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Tokenizes `text` and maps each token to `fnv1a64(token) % vocab_buckets`.
pub fn tokenize_and_hash(text: &str, vocab_buckets: usize) -> Vec<usize> {
    assert!(vocab_buckets >= 1, "vocab_buckets must be positive");
    tokenize(text)
        .iter()
        .map(|t| (fnv1a64(t) % vocab_buckets as u64) as usize)
        .collect()
}
