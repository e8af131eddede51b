//! Token vocabulary with reserved special symbols.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<s>", "</s>", "[M]", "<pad>", "<unk>"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

/// Dense token table; specials occupy ids `0..NUM_SPECIALS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `regular` in order. Special symbols appearing in
    /// `regular` are skipped; any other repeat is an error.
    pub fn new<I, S>(regular: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s.to_string());
        }
        for tok in regular {
            let tok = tok.into();
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                continue;
            }
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Parse(format!("invalid vocabulary token {tok:?}")));
            }
            if v.index.contains_key(&tok) {
                return Err(Error::Parse(format!("duplicate vocabulary token {tok:?}")));
            }
            v.push(tok);
        }
        Ok(v)
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    /// `size` entries in total: the specials plus `w5 .. w{size-1}`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocabulary size {size} leaves no regular tokens"
            )));
        }
        Vocabulary::new((NUM_SPECIALS..size).map(|i| format!("w{i}")))
    }

    /// Ranks whitespace tokens of `lines` by descending frequency (ties by
    /// token text) and keeps at most `max_size` entries in total.
    pub fn from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size.saturating_sub(NUM_SPECIALS));
        Vocabulary::new(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, dropping `<s>`, `</s>` and `<pad>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, BOS | EOS | PAD))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocabulary::new(["a", "<s>", "b"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("[M]"), MASK);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }

    #[test]
    fn corpus_ranking_and_round_trip() {
        let v = Vocabulary::from_corpus(["b a b", "c b a"], 7).unwrap();
        assert_eq!(v.token(5), "b");
        assert_eq!(v.token(6), "a");
        assert_eq!(v.len(), 7);
        assert_eq!(v.decode(&v.encode("a b c")), "a b <unk>");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn synthetic_size_counts_specials() {
        let v = Vocabulary::synthetic(32).unwrap();
        assert_eq!(v.len(), 32);
        assert_eq!(v.token(31), "w31");
    }
}
