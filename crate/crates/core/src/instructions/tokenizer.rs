use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<s>", "</s>"];

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{L}\p{N}]+(?:['.][\p{L}\p{N}]+)*|[^\s\p{L}\p{N}]").expect("valid regex"));

pub fn split_words(text: &str) -> Vec<&str> {
    WORD.find_iter(text).map(|m| m.as_str()).collect()
}

/// Word-level vocabulary: words, numbers (with inner dots) and single
/// punctuation marks, plus unknown / start / end tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for WordTokenizer {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::IncompatibleCheckpoint("tokenizer vocabulary lacks the special tokens".into()));
        }
        let index: HashMap<String, usize> = words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
        if index.len() != words.len() {
            return Err(Error::IncompatibleCheckpoint("tokenizer vocabulary has duplicates".into()));
        }
        Ok(Self { words, index })
    }
}

impl From<WordTokenizer> for Vec<String> {
    fn from(t: WordTokenizer) -> Self {
        t.words
    }
}

impl WordTokenizer {
    /// Vocabulary of every word in `texts`, by frequency then lexicographically.
    pub fn fit<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w.to_string())).collect();
        Self::try_from(words).expect("specials are present and words unique")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).into_iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    /// Joins words with spaces, attaching closing punctuation to the previous word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            let w = self.word(id);
            let attach = matches!(w, "." | "," | "!" | "?" | ";" | ":" | ")" | "%");
            if !out.is_empty() && !attach && !out.ends_with('(') {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}
