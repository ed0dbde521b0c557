//! Warm-start maximum-likelihood training and the three-step RL iteration:
//! sample and score captions, regress the value head, then update the
//! generative partition with normalized advantages.

mod checkpoint;
mod mle;
mod optim;
mod rl;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointKind, OptimizerState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mle::{cross_entropy, mle_pretrain, MleConfig};
pub use optim::{clip_gradients, Adam, ClipMode};
pub use rl::{
    rl_step1_generate, rl_step2_value, rl_step3_policy, train_loop, AdvantageBatch, RlTrainer, Rollout, StepMetrics,
};

use crate::error::{config_err, Result};
use crate::hashing::content_hash;
use crate::model::{DecodeConfig, PolicyLoss};
use crate::rewardshape::BadPhraseSet;
use crate::scorers::{RefLm, SimOracle, SimVariant, RS_EPS, RS_WEIGHT};
use crate::textcore::Vocab;

/// Which reward the RL loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Flavor {
    /// Matching score plus reference-LM naturalness.
    #[default]
    #[serde(rename = "vlrm")]
    Vlrm,
    /// Matching score plus the batch retrieval term, without naturalness.
    #[serde(rename = "vlrm-rs")]
    VlrmRs,
}

impl std::str::FromStr for Flavor {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vlrm" => Ok(Flavor::Vlrm),
            "vlrm-rs" => Ok(Flavor::VlrmRs),
            other => Err(config_err(format!("unknown flavor {other:?} (expected vlrm or vlrm-rs)"))),
        }
    }
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Flavor::Vlrm => "vlrm",
            Flavor::VlrmRs => "vlrm-rs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub clip_mode: ClipMode,
    pub gamma: f64,
    pub flavor: Flavor,
    pub rs_weight: f64,
    pub rs_eps: f64,
    /// Added to the advantage standard deviation before dividing.
    pub adv_eps: f64,
    pub policy_loss: PolicyLoss,
    pub sim_variant: SimVariant,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 20,
            lr: 1e-5,
            batch_size: 64,
            grad_clip: 1.0,
            clip_mode: ClipMode::Elementwise,
            gamma: 1.0,
            flavor: Flavor::Vlrm,
            rs_weight: RS_WEIGHT,
            rs_eps: RS_EPS,
            adv_eps: 1e-8,
            policy_loss: PolicyLoss::Prob,
            sim_variant: SimVariant::RawLogit,
            decode: DecodeConfig::training(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warmup from 0 to `lr` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("grad_clip", self.grad_clip),
            ("rs_eps", self.rs_eps),
            ("adv_eps", self.adv_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.rs_weight >= 0.0 && self.rs_weight.is_finite()) {
            return Err(config_err("rs_weight must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if self.flavor == Flavor::VlrmRs && self.batch_size < 2 {
            return Err(config_err("the vlrm-rs flavor needs batch_size >= 2"));
        }
        self.decode.validate()
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// Everything step 1 needs to score a caption.
#[derive(Debug, Clone)]
pub struct RewardSetup {
    pub vocab: Vocab,
    pub oracle: SimOracle,
    pub reflm: RefLm,
    pub bad_phrases: BadPhraseSet,
}

/// Fan-out for per-caption work. Results are always collected in input
/// order, so reductions do not depend on the worker count.
pub struct Workers {
    n: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn sequential() -> Self {
        Workers {
            n: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if n == 1 {
            return Ok(Self::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| config_err(format!("cannot start {n} workers: {e}")))?;
            Ok(Workers { n, pool: Some(pool) })
        }
        #[cfg(not(feature = "parallel"))]
        Ok(Workers { n })
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub(crate) fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}

impl Default for Workers {
    fn default() -> Self {
        Self::sequential()
    }
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workers").field("n", &self.n).finish()
    }
}

#[cfg(test)]
mod tests;
