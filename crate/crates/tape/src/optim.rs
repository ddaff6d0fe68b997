//! Adaptive-moment optimizers.

use crate::{Matrix, ParamStore, StoreGrads};

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn adamw(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::new(store, learning_rate)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &StoreGrads) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let p = store.get_mut(id);
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bias1) / ((vi / bias2).sqrt() + self.eps);
                let w = &mut p.data_mut()[i];
                if self.weight_decay > 0.0 {
                    *w -= self.learning_rate * self.weight_decay * *w;
                }
                *w -= self.learning_rate * update;
            }
        }
    }
}
