//! Word-level tokenizer for the reference text encoder.

pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "with", "and", "in", "on", "at", "to", "for", "by", "from", "photo",
    "picture", "image", "is", "are", "its", "it", "that", "this", "very", "some", "made",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    /// Exactly `sequence_length` ids: BOS, words, EOS, then EOS padding.
    pub ids: Vec<u32>,
    /// Words kept after truncation; word `i` sits at position `i + 1`.
    pub words: Vec<String>,
    pub truncated: bool,
}

pub fn split_words(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn word_id(word: &str, vocab_size: u32) -> u32 {
    FIRST_WORD_ID + (fnv1a(word) % (vocab_size - FIRST_WORD_ID) as u64) as u32
}

pub fn tokenize(prompt: &str, sequence_length: usize, vocab_size: u32) -> Tokenized {
    let mut words = split_words(prompt);
    let capacity = sequence_length.saturating_sub(2);
    let truncated = words.len() > capacity;
    if truncated {
        log::warn!(
            "prompt has {} words, truncating to {capacity}: {prompt:?}",
            words.len()
        );
        words.truncate(capacity);
    }
    let mut ids = Vec::with_capacity(sequence_length);
    ids.push(BOS);
    ids.extend(words.iter().map(|w| word_id(w, vocab_size)));
    ids.resize(sequence_length, EOS);
    Tokenized {
        ids,
        words,
        truncated,
    }
}

/// Sequence positions of the content words of `prompt` (stopwords removed).
/// Falls back to every word position when all words are stopwords.
pub fn content_token_indices(prompt: &str, sequence_length: usize) -> Vec<usize> {
    let words = split_words(prompt);
    let capacity = sequence_length.saturating_sub(2);
    let kept: Vec<(usize, &String)> = words.iter().take(capacity).enumerate().collect();
    let content: Vec<usize> = kept
        .iter()
        .filter(|(_, w)| !STOPWORDS.contains(&w.as_str()))
        .map(|(i, _)| i + 1)
        .collect();
    if content.is_empty() {
        kept.iter().map(|(i, _)| i + 1).collect()
    } else {
        content
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_bos_then_padding() {
        let t = tokenize("", 77, 4096);
        assert_eq!(t.ids.len(), 77);
        assert_eq!(t.ids[0], BOS);
        assert!(t.ids[1..].iter().all(|&i| i == EOS));
    }

    #[test]
    fn long_prompts_truncate() {
        let prompt = "word ".repeat(100);
        let t = tokenize(&prompt, 77, 4096);
        assert!(t.truncated);
        assert_eq!(t.words.len(), 75);
        assert_eq!(t.ids.len(), 77);
        assert_eq!(t.ids[76], EOS);
    }

    #[test]
    fn content_indices_skip_stopwords() {
        assert_eq!(content_token_indices("a photo of a red bag", 77), vec![5, 6]);
        assert_eq!(content_token_indices("a the", 77), vec![1, 2]);
        assert!(content_token_indices("", 77).is_empty());
    }

    #[test]
    fn ids_are_case_insensitive() {
        assert_eq!(
            tokenize("Red BAG", 8, 4096).ids,
            tokenize("red bag", 8, 4096).ids
        );
    }
}
