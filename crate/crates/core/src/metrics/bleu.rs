//! Corpus BLEU: up to 4-grams, clipped counts summed over the corpus, brevity
//! penalty, no smoothing (any empty n-gram order gives 0), on text tokenized
//! by the international scheme (punctuation next to a non-digit and all
//! symbols split off).

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

static PUNCT_AFTER_NON_DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\P{N})(\p{P})").expect("valid regex"));
static PUNCT_BEFORE_NON_DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\p{P})(\P{N})").expect("valid regex"));
static SYMBOL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\p{S})").expect("valid regex"));

pub fn tokenize_intl(text: &str) -> Vec<String> {
    let s = PUNCT_AFTER_NON_DIGIT.replace_all(text, "$1 $2 ");
    let s = PUNCT_BEFORE_NON_DIGIT.replace_all(&s, " $1 $2");
    let s = SYMBOL.replace_all(&s, " $1 ");
    s.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add_pair(&mut self, candidate: &str, reference: &str) {
        let c = tokenize_intl(candidate.trim());
        let r = tokenize_intl(reference.trim());
        self.candidate_len += c.len() as u64;
        self.reference_len += r.len() as u64;
        for n in 1..=MAX_ORDER {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            self.totals[n - 1] += c.len().saturating_sub(n - 1) as u64;
            self.matches[n - 1] += cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<u64>();
        }
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_precision: f64 = (0..MAX_ORDER)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_precision.exp()
    }
}

pub fn corpus_bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::argument(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::argument("corpus BLEU needs at least one pair"));
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add_pair(c.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_symbols() {
        assert_eq!(tokenize_intl("Bake 3.5 hours, then serve!"), ["Bake", "3.5", "hours", ",", "then", "serve", "!"]);
        assert_eq!(tokenize_intl("350°F"), ["350", "°", "F"]);
        assert_eq!(tokenize_intl("  "), Vec::<String>::new());
    }

    #[test]
    fn identical_and_disjoint() {
        let refs = ["preheat the oven to 350 degrees .", "mix the flour and sugar in a bowl"];
        assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&["x y z w v"], &["a b c d e"]).unwrap(), 0.0);
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn short_candidate_without_four_grams_scores_zero() {
        // 3 unigrams and 2 bigrams and 1 trigram match, but no 4-gram exists.
        assert_eq!(corpus_bleu(&["the cat sat"], &["the cat sat down"]).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_value() {
        let cand = "the cat sat on the mat";
        let reference = "the cat sat on a mat today";
        // 1-grams 5/6 ("the" clipped to one match), 2-grams 3/5, 3-grams 2/4,
        // 4-grams 1/3; 6 candidate tokens against 7 reference tokens.
        let expected = 100.0 * (1.0 - 7.0f64 / 6.0).exp() * ((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0f64)).powf(0.25);
        assert!((corpus_bleu(&[cand], &[reference]).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn surrounding_whitespace_is_ignored() {
        let a = corpus_bleu(&["  a b c d e "], &["a b c d e f"]).unwrap();
        let b = corpus_bleu(&["a b c d e"], &["\ta b c d e f\n"]).unwrap();
        assert_eq!(a, b);
    }
}
