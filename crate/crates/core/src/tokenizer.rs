//! Closed-vocabulary tokenizer for the internal embedding providers.
//!
//! Numerals are split into single characters, words are kept whole.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::synthgen::{UnitLexicon, MULTIPLIERS};
use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

const SYMBOLS: [&str; 3] = [".", "%", "-"];
const BASIS_WORDS: [&str; 2] = ["basis", "points"];

fn is_numeral_char(c: char) -> bool {
    c.is_ascii_digit() || matches!(c, '.' | '%' | '-')
}

/// The fixed token list every vocabulary starts with, in id order.
pub fn builtin_tokens() -> Vec<String> {
    let mut out = vec![PAD.to_string(), UNK.to_string()];
    out.extend((0..10).map(|d| d.to_string()));
    out.extend(SYMBOLS.iter().map(|s| s.to_string()));
    out.extend(MULTIPLIERS.iter().map(|(w, _)| w.to_string()));
    out.extend(BASIS_WORDS.iter().map(|s| s.to_string()));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(list: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in list {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len() as u32);
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `id<TAB>token` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{t}");
        }
        out
    }
}

/// Builtin tokens, then the words of each lexicon unit, then `extra_words`;
/// duplicates keep their first id.
pub fn build_vocab(lexicon: Option<&UnitLexicon>, extra_words: &[&str]) -> Vocabulary {
    let mut vocab = Vocabulary::from_tokens(builtin_tokens());
    if let Some(lex) = lexicon {
        for unit in lex.units() {
            for word in unit.split_whitespace() {
                vocab.push(word.to_string());
            }
        }
    }
    for w in extra_words {
        vocab.push((*w).to_string());
    }
    vocab
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub surfaces: Vec<String>,
    /// True when the token began a whitespace-delimited word.
    pub word_start: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rejoins surfaces, inserting a single space before each word start.
    pub fn detokenize(&self) -> String {
        let mut out = String::new();
        for (i, (s, start)) in self.surfaces.iter().zip(&self.word_start).enumerate() {
            if i > 0 && *start {
                out.push(' ');
            }
            out.push_str(s);
        }
        out
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSeq> {
    let mut seq = TokenSeq {
        ids: Vec::new(),
        surfaces: Vec::new(),
        word_start: Vec::new(),
    };
    for word in text.split_whitespace() {
        if word.chars().all(is_numeral_char) {
            for (j, c) in word.chars().enumerate() {
                let s = c.to_string();
                seq.ids.push(vocab.id(&s).unwrap_or(UNK_ID));
                seq.surfaces.push(s);
                seq.word_start.push(j == 0);
            }
        } else {
            seq.ids.push(vocab.id(word).unwrap_or(UNK_ID));
            seq.surfaces.push(word.to_string());
            seq.word_start.push(true);
        }
    }
    if seq.is_empty() {
        return Err(Error::Data(format!("cannot tokenize blank text {text:?}")));
    }
    Ok(seq)
}
