//! Deterministic hashing tokenizer for the text range.
//!
//! The reference scorer only needs stable ids, not a learned vocabulary:
//! words map into `[1, text_token_count)` via FNV-1a, keeping id 0 free as
//! the end-of-text marker. Splitting is on non-alphanumeric characters
//! after lowercasing, so the mapping is stable across runs and platforms.

use crate::catalog::Vocabulary;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Stable text-token id for a single word.
pub fn word_token(word: &str, text_token_count: usize) -> Option<usize> {
    if text_token_count < 2 {
        return None;
    }
    let h = fnv1a(word.as_bytes());
    Some(1 + (h % (text_token_count as u64 - 1)) as usize)
}

/// Tokenizes free text into text-range ids.
pub fn tokenize_text(text: &str, vocabulary: &Vocabulary) -> Vec<usize> {
    let lowered = text.to_lowercase();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .filter_map(|w| word_token(w, vocabulary.text_token_count()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ItemTypeSpace;

    fn vocab() -> Vocabulary {
        Vocabulary::build(64, &[ItemTypeSpace::new("ep", 4, 4, 2, 4).unwrap()]).unwrap()
    }

    #[test]
    fn tokenization_is_stable_and_case_insensitive() {
        let v = vocab();
        let a = tokenize_text("Morning news, daily!", &v);
        let b = tokenize_text("morning NEWS daily", &v);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn ids_stay_inside_text_range_and_avoid_eot() {
        let v = vocab();
        for id in tokenize_text("a very long sentence with many different words", &v) {
            assert!(id >= 1 && id < v.text_token_count());
        }
    }

    #[test]
    fn empty_and_punctuation_only_yield_nothing() {
        let v = vocab();
        assert!(tokenize_text("", &v).is_empty());
        assert!(tokenize_text("... --- !!!", &v).is_empty());
    }
}
