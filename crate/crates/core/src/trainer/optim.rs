use serde::{Deserialize, Serialize};

use crate::model::ParamGroup;

/// Adam without weight decay. Moments are stored per tensor in the group's
/// walk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamGroup>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: ParamGroup>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp every gradient component to `[-threshold, threshold]`.
    #[default]
    Elementwise,
    /// Rescale the whole group when its L2 norm exceeds the threshold.
    GlobalNorm,
}

/// Clips `grads` in place and returns the number of components that were
/// clamped (element-wise) or 1/0 for whether rescaling happened (global norm).
pub fn clip_gradients<P: ParamGroup>(grads: &mut P, mode: ClipMode, threshold: f64) -> usize {
    match mode {
        ClipMode::Elementwise => {
            let mut clipped = 0;
            for t in grads.tensors_mut() {
                for x in t.iter_mut() {
                    if x.abs() > threshold {
                        *x = x.clamp(-threshold, threshold);
                        clipped += 1;
                    }
                }
            }
            clipped
        }
        ClipMode::GlobalNorm => {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > threshold {
                grads.scale(threshold / norm);
                1
            } else {
                0
            }
        }
    }
}
