use std::collections::BTreeSet;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// True/false positive and false negative counts summed over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SetCountAccumulator {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl SetCountAccumulator {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn update(&mut self, predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) {
        let hits = predicted.intersection(truth).count() as u64;
        self.tp += hits;
        self.fp += predicted.len() as u64 - hits;
        self.fn_ += truth.len() as u64 - hits;
    }

    /// Convenience over id slices; duplicates are ignored.
    pub fn update_ids(&mut self, predicted: &[usize], truth: &[usize]) {
        let p: BTreeSet<usize> = predicted.iter().copied().collect();
        let t: BTreeSet<usize> = truth.iter().copied().collect();
        self.update(&p, &t);
    }
}

impl Add for SetCountAccumulator {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl std::iter::Sum for SetCountAccumulator {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub iou: f64,
    pub f1: f64,
}

pub fn update_set_counts(
    acc: SetCountAccumulator,
    predicted: &BTreeSet<usize>,
    truth: &BTreeSet<usize>,
) -> SetCountAccumulator {
    let mut acc = acc;
    acc.update(predicted, truth);
    acc
}

pub fn merge_set_counts(a: SetCountAccumulator, b: SetCountAccumulator) -> SetCountAccumulator {
    a + b
}

/// `iou = tp / (tp + fp + fn)`, `f1 = 2 tp / (2 tp + fp + fn)`.
pub fn finalize_set_metrics(acc: &SetCountAccumulator) -> Result<SetMetrics> {
    let denom = acc.tp + acc.fp + acc.fn_;
    if denom == 0 {
        return Err(Error::argument("set metrics are undefined for an all-zero accumulator"));
    }
    Ok(SetMetrics {
        iou: acc.tp as f64 / denom as f64,
        f1: (2 * acc.tp) as f64 / (2 * acc.tp + acc.fp + acc.fn_) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn update_examples() {
        let z = SetCountAccumulator::default();
        assert_eq!(update_set_counts(z, &s(&[0, 1, 2]), &s(&[1, 2, 3])), SetCountAccumulator::new(2, 1, 1));
        assert_eq!(update_set_counts(z, &s(&[4, 5]), &s(&[4, 5])), SetCountAccumulator::new(2, 0, 0));
        assert_eq!(update_set_counts(z, &s(&[]), &s(&[])), z);
    }

    #[test]
    fn merge_examples() {
        let a = SetCountAccumulator::new(1, 2, 3);
        let b = SetCountAccumulator::new(4, 5, 6);
        assert_eq!(merge_set_counts(a, b), SetCountAccumulator::new(5, 7, 9));
        assert_eq!(merge_set_counts(a, SetCountAccumulator::default()), a);
        assert_eq!(merge_set_counts(a, b), merge_set_counts(b, a));
    }

    #[test]
    fn finalize_examples() {
        let m = finalize_set_metrics(&SetCountAccumulator::new(2, 1, 1)).unwrap();
        assert_eq!(m.iou, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(finalize_set_metrics(&SetCountAccumulator::new(7, 0, 0)).unwrap(), SetMetrics { iou: 1.0, f1: 1.0 });
        assert!(finalize_set_metrics(&SetCountAccumulator::default()).is_err());
    }

    proptest! {
        #[test]
        fn dice_dominates_jaccard(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            prop_assume!(tp + fp + fn_ > 0);
            let m = finalize_set_metrics(&SetCountAccumulator::new(tp, fp, fn_)).unwrap();
            prop_assert!(0.0 <= m.iou && m.iou <= m.f1 && m.f1 <= 1.0);
        }
    }
}
