use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const USER: &str = "[USER]";
pub const SYS: &str = "[SYS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const ITEM: &str = "[ITEM]";

const SPECIALS: [&str; 8] = [PAD, UNK, USER, SYS, SEP, EOS, MASK, ITEM];

/// Splits text into lowercase word tokens with their byte spans in the input.
///
/// Runs of alphanumerics (plus `'` and `_`) form a word; every other
/// non-whitespace character is a token on its own.
pub fn tokenize(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        let wordy = ch.is_alphanumeric() || ch == '\'' || ch == '_';
        if wordy {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push((text[s..i].to_lowercase(), s..i));
        }
        if !ch.is_whitespace() {
            let end = i + ch.len_utf8();
            out.push((text[i..end].to_lowercase(), i..end));
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), s..text.len()));
    }
    out
}

pub fn words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|(w, _)| w).collect()
}

/// Word vocabulary shared by the decoder and the bidirectional encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Special tokens first, then every distinct word in first-seen order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect());
        for w in words {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.get(word).unwrap_or_else(|| self.special(UNK))
    }

    pub fn special(&self, tok: &str) -> TokenId {
        self.index[tok]
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|(w, _)| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected special token {s}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
