//! Token sequences and the toy byte-level tokenizer.
//!
//! The toy tokenizer maps a contiguous byte range to token ids one-to-one and
//! appends registered special tokens after the byte range. `encode` never
//! produces special ids from plain text; special ids are only inserted by
//! chat formatting code, which mirrors how real tokenizers treat reserved
//! tokens in untrusted input.

use std::collections::BTreeSet;

/// A tokenized piece of text. `ids` and `text` are kept together so that
/// downstream code never has to guess which tokenizer produced a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> TokenSequence;
    /// Decoded string for a single token id, or `None` if out of range.
    fn decode_token(&self, id: u32) -> Option<String>;

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| self.decode_token(id))
            .collect()
    }

    /// Ids of registered special tokens (never produced by `encode`).
    fn special_ids(&self) -> Vec<u32> {
        Vec::new()
    }
}

/// Returns exactly the ids whose decoded string is non-empty and contains
/// only ASCII bytes.
pub fn token_filter_ascii<T: Tokenizer + ?Sized>(tokenizer: &T) -> BTreeSet<u32> {
    (0..tokenizer.vocab_size() as u32)
        .filter(|&id| {
            tokenizer
                .decode_token(id)
                .map(|s| !s.is_empty() && s.is_ascii())
                .unwrap_or(false)
        })
        .collect()
}

/// Byte-level tokenizer over the byte range `[lo, hi)`, plus special tokens.
///
/// Token id `i < hi - lo` decodes to the single byte `lo + i`. Bytes outside
/// the range encode to the replacement byte `b'?'` (which must be in range),
/// so `decode(encode(text))` round-trips exactly for any text produced by
/// `decode`.
#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    lo: u8,
    hi: u8,
    specials: Vec<String>,
}

impl ToyTokenizer {
    pub fn new(lo: u8, hi: u8) -> Self {
        assert!(lo < hi && hi <= 128, "byte range must lie inside ASCII");
        assert!((lo..hi).contains(&b'?'), "replacement byte must be in range");
        Self {
            lo,
            hi,
            specials: Vec::new(),
        }
    }

    /// Full 7-bit ASCII vocabulary.
    pub fn ascii() -> Self {
        Self::new(0, 128)
    }

    /// Printable-subset vocabulary of the given size, starting at space (0x20).
    pub fn printable(vocab: usize) -> Self {
        assert!(vocab > 0 && 0x20 + vocab <= 128);
        Self::new(0x20, (0x20 + vocab) as u8)
    }

    pub fn byte_vocab(&self) -> usize {
        (self.hi - self.lo) as usize
    }

    /// Registers `text` as a special token and returns its id. Re-registering
    /// the same string returns the existing id.
    pub fn register_special(&mut self, text: &str) -> u32 {
        assert!(!text.is_empty());
        if let Some(idx) = self.specials.iter().position(|s| s == text) {
            return self.byte_vocab() as u32 + idx as u32;
        }
        self.specials.push(text.to_string());
        self.byte_vocab() as u32 + (self.specials.len() - 1) as u32
    }

    pub fn special_id(&self, text: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == text)
            .map(|idx| self.byte_vocab() as u32 + idx as u32)
    }

    pub fn id_for_byte(&self, byte: u8) -> u32 {
        let b = if (self.lo..self.hi).contains(&byte) {
            byte
        } else {
            b'?'
        };
        (b - self.lo) as u32
    }

    /// Encodes text while recognizing registered special-token strings by
    /// longest match. Used by chat formatting; ordinary `encode` treats the
    /// same strings as plain bytes.
    pub fn encode_with_specials(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            let mut best: Option<(usize, u32)> = None;
            for (idx, s) in self.specials.iter().enumerate() {
                let sb = s.as_bytes();
                if bytes[i..].starts_with(sb) {
                    let id = self.byte_vocab() as u32 + idx as u32;
                    if best.map(|(l, _)| sb.len() > l).unwrap_or(true) {
                        best = Some((sb.len(), id));
                    }
                }
            }
            if let Some((len, id)) = best {
                ids.push(id);
                i += len;
                continue 'outer;
            }
            ids.push(self.id_for_byte(bytes[i]));
            i += 1;
        }
        ids
    }
}

impl Tokenizer for ToyTokenizer {
    fn vocab_size(&self) -> usize {
        self.byte_vocab() + self.specials.len()
    }

    fn encode(&self, text: &str) -> TokenSequence {
        let ids: Vec<u32> = text.bytes().map(|b| self.id_for_byte(b)).collect();
        let text = self.decode(&ids);
        TokenSequence { ids, text }
    }

    fn decode_token(&self, id: u32) -> Option<String> {
        let nb = self.byte_vocab() as u32;
        if id < nb {
            Some(((self.lo + id as u8) as char).to_string())
        } else {
            self.specials.get((id - nb) as usize).cloned()
        }
    }

    fn special_ids(&self) -> Vec<u32> {
        let nb = self.byte_vocab() as u32;
        (0..self.specials.len() as u32).map(|i| nb + i).collect()
    }
}
