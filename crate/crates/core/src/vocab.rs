//! Token-id layout shared by the corpus and the model.
//!
//! Ids `0..NUM_SPECIAL` are reserved for control and special tokens, text
//! tokens follow, and a contiguous tail range holds discrete visual tokens.

use serde::{Deserialize, Serialize};
use std::ops::Range;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
/// Control token that opens an augmentation (`/augment`).
pub const AUGMENT: TokenId = 3;
/// Control token that requests direct embedding (`/embed`).
pub const EMBED: TokenId = 4;
pub const NUM_SPECIAL: TokenId = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    /// Half-open interval of visual token ids.
    pub visual_lo: u32,
    pub visual_hi: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("visual range {lo}..{hi} must be non-empty and lie within {special}..{size}")]
    BadVisualRange { lo: u32, hi: u32, special: u32, size: u32 },
    #[error("vocabulary has no room for text tokens")]
    NoTextRange,
}

impl Vocabulary {
    pub fn new(size: u32, visual: Range<u32>) -> Result<Self, VocabError> {
        let v = Self { size, visual_lo: visual.start, visual_hi: visual.end };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), VocabError> {
        if self.visual_lo >= self.visual_hi || self.visual_lo < NUM_SPECIAL || self.visual_hi > self.size {
            return Err(VocabError::BadVisualRange {
                lo: self.visual_lo,
                hi: self.visual_hi,
                special: NUM_SPECIAL,
                size: self.size,
            });
        }
        if self.text_range().is_empty() {
            return Err(VocabError::NoTextRange);
        }
        Ok(())
    }

    pub fn visual_range(&self) -> Range<u32> {
        self.visual_lo..self.visual_hi
    }

    /// Ids usable as ordinary text tokens: everything that is neither special nor visual.
    ///
    /// The text range is the block between the specials and the visual range.
    pub fn text_range(&self) -> Range<u32> {
        NUM_SPECIAL..self.visual_lo
    }

    pub fn is_special(id: TokenId) -> bool {
        id < NUM_SPECIAL
    }

    pub fn is_control(id: TokenId) -> bool {
        id == AUGMENT || id == EMBED
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        self.text_range().contains(&id)
    }

    pub fn is_visual(&self, id: TokenId) -> bool {
        self.visual_range().contains(&id)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { size: 512, visual_lo: 384, visual_hi: 512 }
    }
}

/// Deterministic word→id mapping used to bring teacher answers into the toy vocabulary.
///
/// Words hash with FNV-1a (salted by `seed`) into the text range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordHasher {
    pub seed: u64,
    pub lo: u32,
    pub hi: u32,
}

impl WordHasher {
    pub fn for_vocab(vocab: &Vocabulary, seed: u64) -> Self {
        let r = vocab.text_range();
        Self { seed, lo: r.start, hi: r.end }
    }

    pub fn token(&self, word: &str) -> TokenId {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for b in self.seed.to_le_bytes().iter().chain(word.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        self.lo + (h % u64::from(self.hi - self.lo)) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.token(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_is_valid() {
        let v = Vocabulary::default();
        v.validate().unwrap();
        assert!(!v.is_text(EOS));
        assert!(v.is_text(NUM_SPECIAL));
        assert!(v.is_visual(511));
        assert!(!v.is_visual(512));
    }

    #[test]
    fn rejects_visual_overlapping_specials() {
        assert!(Vocabulary::new(64, 2..10).is_err());
        assert!(Vocabulary::new(64, 5..65).is_err());
        assert!(Vocabulary::new(64, 5..10).is_err(), "no text ids left");
    }

    #[test]
    fn hasher_stays_in_text_range_and_is_deterministic() {
        let v = Vocabulary::default();
        let h = WordHasher::for_vocab(&v, 7);
        for i in 0..1000 {
            let w = format!("w{i}");
            let t = h.token(&w);
            assert!(v.is_text(t));
            assert_eq!(t, h.token(&w));
        }
        assert_ne!(WordHasher::for_vocab(&v, 8).tokenize("a b c"), h.tokenize("a b c"));
    }
}
