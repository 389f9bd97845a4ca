//! Adam over named parameter tensors.

use std::collections::BTreeMap;

use gradtape::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// parameters can appear and disappear (decoded candidates are dropped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params` and `grads` are matched by
    /// position; names key the moment buffers.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((name, p), g) in params.iter_mut().zip(grads) {
            let n = p.len();
            let mom = self
                .state
                .entry((*name).to_string())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            if mom.m.len() != n {
                *mom = Moments { m: vec![0.0; n], v: vec![0.0; n] };
            }
            let mut data = p.to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * gi;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = mom.m[i] / c1;
                let vh = mom.v[i] / c2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            **p = Tensor::new(p.shape().to_vec(), data).expect("same shape");
        }
    }

    /// Drops moment buffers whose name starts with `prefix`.
    pub fn forget(&mut self, prefix: &str) {
        self.state.retain(|k, _| !k.starts_with(prefix));
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|x| x * k);
        }
    }
    norm
}
