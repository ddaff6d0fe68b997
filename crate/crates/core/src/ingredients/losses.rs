//! Set-prediction losses on plain values. The training loop builds the same
//! quantities on the autodiff graph; these are the reference evaluations.

use platter_tape::Matrix;
use serde::{Deserialize, Serialize};

use crate::corpus::IngredientSetVector;
use crate::error::{Error, Result};

/// Weights of the ingredient, EOS and cardinality terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ingredients: f64,
    pub eos: f64,
    pub cardinality: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ingredients: 100.0,
            eos: 1.0,
            cardinality: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(ingredients: f64, eos: f64, cardinality: f64) -> Self {
        Self {
            ingredients,
            eos,
            cardinality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ingredients", self.ingredients), ("eos", self.eos), ("cardinality", self.cardinality)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow; exact 0 at `-inf`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(z)` against a 0/1 target.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    if target >= 0.5 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

fn sigmoid(z: f64) -> f64 {
    platter_tape::sigmoid(z)
}

/// Column-wise maximum over the ingredient columns (the last column, EOS, is excluded).
pub fn pool_step_logits(steps: &Matrix) -> Result<Vec<f64>> {
    if steps.rows() == 0 || steps.cols() == 0 {
        return Err(Error::argument("step logits need at least one step and the EOS column"));
    }
    let n = steps.cols() - 1;
    let mut pooled = steps.row(0)[..n].to_vec();
    for t in 1..steps.rows() {
        for (p, &v) in pooled.iter_mut().zip(&steps.row(t)[..n]) {
            if v > *p {
                *p = v;
            }
        }
    }
    Ok(pooled)
}

fn check_len(pooled: &[f64], target: &IngredientSetVector) -> Result<()> {
    if pooled.len() != target.len() {
        return Err(Error::argument(format!(
            "pooled logits have length {}, target has {}",
            pooled.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over the N ingredient positions.
pub fn ingredient_loss(pooled: &[f64], target: &IngredientSetVector) -> Result<f64> {
    check_len(pooled, target)?;
    if pooled.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pooled.iter().zip(target.bits()).map(|(&z, &b)| bce_with_logit(z, b as f64)).sum();
    Ok(sum / pooled.len() as f64)
}

/// EOS targets: 0 for steps before `k`, 1 from step `k` on.
pub fn eos_targets(steps: usize, k: usize) -> Vec<f64> {
    (0..steps).map(|t| if t < k { 0.0 } else { 1.0 }).collect()
}

/// Mean binary cross-entropy of the EOS column against [`eos_targets`].
pub fn eos_loss(steps: &Matrix, k: usize) -> Result<f64> {
    if steps.rows() == 0 || steps.cols() == 0 {
        return Err(Error::argument("step logits need at least one step and the EOS column"));
    }
    let eos = steps.cols() - 1;
    let targets = eos_targets(steps.rows(), k);
    let mut terms: Vec<f64> = (0..steps.rows()).map(|t| bce_with_logit(steps.get(t, eos), targets[t])).collect();
    // summed in sorted order so swapping steps with equal targets is exact
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / steps.rows() as f64)
}

/// `|Σ sigmoid(pooled) - K|`.
pub fn cardinality_loss(pooled: &[f64], target: &IngredientSetVector) -> Result<f64> {
    check_len(pooled, target)?;
    let predicted: f64 = pooled.iter().map(|&z| sigmoid(z)).sum();
    Ok((predicted - target.cardinality() as f64).abs())
}

pub fn composite_loss(ingredients: f64, eos: f64, cardinality: f64, w: &LossWeights) -> f64 {
    w.ingredients * ingredients + w.eos * eos + w.cardinality * cardinality
}

/// The three terms and their weighted sum for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_ingr: f64,
    pub loss_eos: f64,
    pub loss_card: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.loss_ingr.is_finite() && self.loss_eos.is_finite() && self.loss_card.is_finite() && self.total.is_finite()
    }
}

/// Losses of a teacher-driven step matrix: pooling covers steps `0..=K`
/// (through the step where EOS should fire), the EOS term covers every step.
pub fn sample_losses(steps: &Matrix, target: &IngredientSetVector, w: &LossWeights) -> Result<LossBreakdown> {
    let k = target.cardinality();
    let pool_rows = (k + 1).min(steps.rows());
    let pooled = pool_step_logits(&steps.slice_rows(0, pool_rows))?;
    let loss_ingr = ingredient_loss(&pooled, target)?;
    let loss_eos = eos_loss(steps, k)?;
    let loss_card = cardinality_loss(&pooled, target)?;
    Ok(LossBreakdown {
        loss_ingr,
        loss_eos,
        loss_card,
        total: composite_loss(loss_ingr, loss_eos, loss_card, w),
    })
}
