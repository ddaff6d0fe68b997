use crate::error::{Error, Result};

/// Lowercases and collapses runs of whitespace.
pub fn normalize_title(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Length of the longest common subsequence of two character sequences.
pub fn lcs_length(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level LCS of the normalized strings divided by the normalized
/// reference length. Not symmetric.
pub fn lcs_similarity(candidate: &str, reference: &str) -> Result<f64> {
    let r: Vec<char> = normalize_title(reference).chars().collect();
    if r.is_empty() {
        return Err(Error::argument("LCS similarity needs a nonempty reference"));
    }
    let c: Vec<char> = normalize_title(candidate).chars().collect();
    Ok(lcs_length(&c, &r) as f64 / r.len() as f64)
}
