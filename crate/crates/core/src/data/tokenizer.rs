/// Lowercasing, punctuation-splitting tokenizer that hashes words into a
/// fixed vocabulary. Id 0 is reserved for padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
}

pub const PAD_ID: usize = 0;

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= 2, "vocabulary needs room beyond padding");
        HashTokenizer { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Splits text into lowercase alphanumeric words.
    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    pub fn token_id(&self, word: &str) -> usize {
        // FNV-1a, stable across platforms and runs.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        1 + (h % (self.vocab_size as u64 - 1)) as usize
    }

    /// Token ids of the first `max_len` words.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        Self::words(text)
            .take(max_len)
            .map(|w| self.token_id(&w))
            .collect()
    }
}
