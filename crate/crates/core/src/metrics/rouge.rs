//! Summary-level ROUGE-L: texts are split into sentences, each reference
//! sentence is scored by the union of its longest common subsequences with
//! every candidate sentence, hits are clipped by token counts, and precision
//! and recall combine into an F-measure with recall weighted by beta.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn sentences(text: &str) -> Vec<Vec<String>> {
    crate::instructions::split_into_steps(text)
        .iter()
        .flat_map(|s| s.lines().map(str::to_string).collect::<Vec<_>>())
        .map(|s| tokens(&s))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Indices into `a` of one longest common subsequence with `b`.
fn lcs_indices(a: &[String], b: &[String]) -> Vec<usize> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![vec![0u32; m + 1]; n + 1];
    for i in 0..n {
        for j in 0..m {
            table[i + 1][j + 1] = if a[i] == b[j] {
                table[i][j] + 1
            } else {
                table[i][j + 1].max(table[i + 1][j])
            };
        }
    }
    let (mut i, mut j) = (n, m);
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if table[i - 1][j] >= table[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// ROUGE-L F-measure on a 0 to 100 scale.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let refs = sentences(reference.trim());
    if refs.is_empty() {
        return Err(Error::argument("ROUGE-L needs a nonempty reference"));
    }
    let cands = sentences(candidate.trim());
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let cand_len: usize = cands.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let count = |sents: &[Vec<String>]| {
        let mut c: HashMap<String, usize> = HashMap::new();
        for t in sents.iter().flatten() {
            *c.entry(t.clone()).or_default() += 1;
        }
        c
    };
    let (mut ref_counts, mut cand_counts) = (count(&refs), count(&cands));
    let mut hits = 0usize;
    for r in &refs {
        let union: BTreeSet<usize> = cands.iter().flat_map(|c| lcs_indices(r, c)).collect();
        for i in union {
            let t = &r[i];
            let (rc, cc) = (ref_counts.get_mut(t), cand_counts.get_mut(t));
            if let (Some(rc), Some(cc)) = (rc, cc) {
                if *rc > 0 && *cc > 0 {
                    hits += 1;
                    *rc -= 1;
                    *cc -= 1;
                }
            }
        }
    }
    if hits == 0 {
        return Ok(0.0);
    }
    let recall = hits as f64 / ref_len as f64;
    let precision = hits as f64 / cand_len as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok(100.0 * (1.0 + b2) * precision * recall / (recall + b2 * precision))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_values() {
        assert!((rouge_l("mix the flour.", "mix the flour.").unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(rouge_l("x y", "a b").unwrap(), 0.0);
        assert!(rouge_l("a", "  ").is_err());
    }

    #[test]
    fn lcs_of_two_over_three_tokens() {
        // P = R = 2/3, so F = 2/3 whatever beta is.
        let v = rouge_l("a b c", "a c d").unwrap();
        assert!((v - 200.0 / 3.0).abs() < 1e-9);
        // Unequal lengths: LCS("a b", "a c b d") = 2, P = 1, R = 1/2.
        let (p, r) = (1.0, 0.5);
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let expected = 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l("a b", "a c b d").unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn union_over_candidate_sentences() {
        // Reference sentence "a b c d" meets "a b" and "c d" in separate candidate sentences.
        let v = rouge_l("a b. c d.", "a b c d.").unwrap();
        assert!((v - 100.0).abs() < 1e-9);
    }

    #[test]
    fn surrounding_whitespace_is_ignored() {
        assert_eq!(rouge_l("  a b c\n", "a c d").unwrap(), rouge_l("a b c", " a c d ").unwrap());
    }
}
