use serde::{Deserialize, Serialize};

use super::shadow::{ParamSet, ShadowNetwork};

/// Adam with decoupled weight decay on weights (biases are not decayed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(shadow: &ShadowNetwork, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: shadow.zero_params(),
            v: shadow.zero_params(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], decay: f64| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] *= 1.0 - lr * decay;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (l, ((g, m), v)) in params
            .layers
            .iter_mut()
            .zip(grads.layers.iter().zip(&mut self.m.layers).zip(&mut self.v.layers))
        {
            update(&mut l.weights, &g.weights, &mut m.weights, &mut v.weights, weight_decay);
            update(&mut l.bias, &g.bias, &mut m.bias, &mut v.bias, 0.0);
        }
    }
}
