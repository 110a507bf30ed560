//! Word-level tokenizer with the reserved specials, including the [SEG]
//! segmentation token.

use std::collections::HashMap;

use crate::datamodel::SEG_TOKEN;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const SEG_ID: usize = 3;
pub const UNK_ID: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", SEG_TOKEN, "<unk>"];

/// Token list with fixed special indices 0..4 and a bijective
/// token↔id mapping. Persisted as a plain JSON token list.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        debug_assert_eq!(&tokens[..5], &SPECIALS);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Build from a text corpus: specials first, then the corpus words
    /// sorted for determinism.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = Vec::new();
        for text in texts {
            for piece in split_pieces(text) {
                if let Piece::Word(w) = piece {
                    words.push(w);
                }
            }
        }
        words.sort();
        words.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lowercased word/punctuation split; [SEG] maps to its special id
    /// regardless of surrounding punctuation; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_pieces(text)
            .into_iter()
            .map(|piece| match piece {
                Piece::Seg => SEG_ID,
                Piece::Word(w) => self.id_of(&w).unwrap_or(UNK_ID),
            })
            .collect()
    }

    /// Inverse of `tokenize` up to case and whitespace normalization.
    /// Specials other than [SEG] are dropped; punctuation attaches to the
    /// preceding word.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            let tok = self.token(id);
            let is_punct = tok.chars().count() == 1
                && !tok.chars().next().unwrap().is_alphanumeric();
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

enum Piece {
    Seg,
    Word(String),
}

/// Split text into [SEG] markers, lowercase words, and single-character
/// punctuation pieces.
fn split_pieces(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    for (i, chunk) in text.split(SEG_TOKEN).enumerate() {
        if i > 0 {
            pieces.push(Piece::Seg);
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() || c == '_' {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    pieces.push(Piece::Word(std::mem::take(&mut word)));
                }
                if !c.is_whitespace() {
                    pieces.push(Piece::Word(c.to_string()));
                }
            }
        }
        if !word.is_empty() {
            pieces.push(Piece::Word(word));
        }
    }
    pieces
}
