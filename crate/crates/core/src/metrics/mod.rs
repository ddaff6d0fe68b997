//! Corpus-level evaluation: accumulated-count IoU and F1 for ingredient sets,
//! corpus BLEU and ROUGE-L for generated text. Scores use a 0 to 100 scale
//! except IoU and F1, which are fractions.

mod bleu;
mod rouge;
mod sets;

pub use self::bleu::{corpus_bleu, tokenize_intl, BleuStats};
pub use self::rouge::{rouge_l, ROUGE_BETA};
pub use self::sets::{finalize_set_metrics, merge_set_counts, update_set_counts, SetCountAccumulator, SetMetrics};

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_uses_sample_deviation() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
