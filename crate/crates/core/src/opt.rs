//! AdamW with decoupled weight decay plus global-norm gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment state for one parameter.
#[derive(Clone, Debug)]
pub struct Moments<F: Scalar> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

pub struct Adam<F: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub state: HashMap<String, Moments<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, state: HashMap::new() }
    }

    /// One update over named gradients. `apply` must walk the module's
    /// parameters with the same names used during binding.
    pub fn update(
        &mut self,
        grads: &HashMap<String, Tensor<F>>,
        apply: impl FnOnce(crate::nn::VisitMut<F>),
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = s::<F>(self.cfg.beta1);
        let b2 = s::<F>(self.cfg.beta2);
        let lr = s::<F>(self.cfg.lr);
        let eps = s::<F>(self.cfg.eps);
        let wd = s::<F>(self.cfg.weight_decay);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);

        let state = &mut self.state;
        let mut f = |name: String, p: &mut Tensor<F>| {
            let Some(g) = grads.get(&name) else { return };
            let entry = state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape().to_vec()),
                v: Tensor::zeros(p.shape().to_vec()),
            });
            let (md, vd) = (entry.m.data_mut(), entry.v.data_mut());
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (F::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (F::one() - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
            }
        };
        apply(&mut f);
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(
    grads: &mut HashMap<String, Tensor<F>>,
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = s::<F>(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
