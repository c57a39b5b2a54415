use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Zip;

use crate::encoders::Param;
use crate::tensor::{cst, Float, Mat};

/// Adam with decoupled weight decay. State is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    state: BTreeMap<String, (Mat<F>, Mat<F>)>,
}

impl<F: Float> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Starts a new optimizer step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update to `p`. A missing gradient counts as zero.
    pub fn update(&mut self, name: &str, p: &mut Param<F>, grad: Option<&Mat<F>>) {
        let w = Arc::make_mut(p);
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Mat::zeros(w.dim()), Mat::zeros(w.dim())));
        let (b1, b2) = (cst::<F>(self.beta1), cst::<F>(self.beta2));
        let one = F::one();
        let lr = cst::<F>(self.lr);
        let decay = one - lr * cst::<F>(self.weight_decay);
        let c1 = cst::<F>(1.0 - self.beta1.powi(self.t));
        let c2 = cst::<F>(1.0 - self.beta2.powi(self.t));
        let eps = cst::<F>(self.eps);
        let zero = Mat::zeros(w.dim());
        let g = grad.unwrap_or(&zero);
        Zip::from(&mut *w)
            .and(&mut *m)
            .and(&mut *v)
            .and(g)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w = *w * decay - lr * mh / (vh.sqrt() + eps);
            });
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut BTreeMap<String, Mat<F>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = cst::<F>(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
