/// Token id used for texts without any word token.
pub const EMPTY_TOKEN: usize = 0;

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Lowercased words split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hashed token ids in `1..vocab_size`, truncated to `max_tokens`.
pub fn tokenize(text: &str, vocab_size: usize, max_tokens: usize) -> Vec<usize> {
    words(text)
        .iter()
        .take(max_tokens)
        .map(|w| 1 + (fnv1a(w) % (vocab_size as u64 - 1)) as usize)
        .collect()
}
