use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_gradients, Adam, ClipMode};
use super::Workers;
use crate::error::{config_err, contract, Error, Result};
use crate::hashing::mix_seed;
use crate::model::{Gradients, ParamGroup, PolicyLoss, PolicyNet};
use crate::textcore::{Scene, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Also fit the embeddings and recurrent weights.
    pub train_core: bool,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            epochs: 8,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            train_core: true,
            grad_clip: Some(5.0),
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(config_err("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Mean per-token negative log-likelihood of the reference captions.
pub fn cross_entropy(policy: &PolicyNet, data: &[(Scene, TokenSeq)]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for (scene, caption) in data {
        nll -= policy.token_logprobs(&scene.embedding, caption.ids())?.iter().sum::<f64>();
        tokens += caption.len();
    }
    Ok(nll / tokens.max(1) as f64)
}

/// Teacher-forced cross-entropy training on reference captions.
/// Returns the mean per-caption loss of each epoch (measured before each
/// minibatch update).
pub fn mle_pretrain(
    policy: &mut PolicyNet,
    data: &[(Scene, TokenSeq)],
    cfg: &MleConfig,
    workers: &Workers,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract("empty training corpus"));
    }
    let mut opt_generative = Adam::new(&policy.generative);
    let mut opt_core = Adam::new(&policy.core);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64])));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let snapshot: &PolicyNet = policy;
            let per_seq = workers.map(chunk.len(), |j| {
                let (scene, caption) = &data[chunk[j]];
                let ones = vec![1.0; caption.len()];
                snapshot.policy_loss_grad(&scene.embedding, caption.ids(), &ones, PolicyLoss::LogProb, cfg.train_core)
            });
            let mut total = Gradients::default();
            for item in per_seq {
                let (loss, g) = item?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("cross-entropy {loss} in epoch {epoch}")));
                }
                epoch_loss += loss;
                total.add_assign(&g);
            }
            total.scale(1.0 / chunk.len() as f64);
            let mut g_gen = total.generative.ok_or_else(|| contract("missing generative gradients"))?;
            if !g_gen.is_finite() {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut g_gen, ClipMode::GlobalNorm, c);
            }
            opt_generative.step(&mut policy.generative, &g_gen, cfg.lr);
            if let Some(mut g_core) = total.core {
                if let Some(c) = cfg.grad_clip {
                    clip_gradients(&mut g_core, ClipMode::GlobalNorm, c);
                }
                opt_core.step(&mut policy.core, &g_core, cfg.lr);
            }
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok(history)
}
