use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind, OptimizerState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use super::optim::{clip_gradients, Adam};
use super::{Flavor, RewardSetup, TrainConfig, Workers};
use crate::error::{contract, Error, Result};
use crate::eval::embed_caption;
use crate::hashing::mix_seed;
use crate::model::{decode, Gradients, ParamGroup, PolicyNet, ValueHead, ValueParams};
use crate::rewardshape::{compute_returns, PenaltyFlags, ReturnVector};
use crate::scorers::{ref_score, rs_reward, sim_score};
use crate::textcore::{Scene, TokenSeq};

const BATCH_STREAM: u64 = 0xBA7C;

/// One sampled caption with its reward breakdown. `scene` indexes the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub scene: usize,
    pub caption: TokenSeq,
    pub sim: f64,
    pub reference: f64,
    pub flags: PenaltyFlags,
    pub returns: ReturnVector,
}

/// Samples one caption per scene and scores it. Parameters are only read.
///
/// Caption `i` of step `step` draws from its own stream seeded by
/// `(seed, step, i)`, so results do not depend on the worker count.
pub fn rl_step1_generate(
    policy: &PolicyNet,
    scenes: &[&Scene],
    rewards: &RewardSetup,
    cfg: &TrainConfig,
    step: u64,
    workers: &Workers,
) -> Result<Vec<Rollout>> {
    let b = scenes.len();
    if b == 0 {
        return Err(contract("empty batch"));
    }
    if cfg.flavor == Flavor::VlrmRs && b < 2 {
        return Err(contract("the vlrm-rs reward needs a batch of at least 2"));
    }
    let captions: Vec<TokenSeq> = workers
        .map(b, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, step, i as u64]));
            decode(policy, &scenes[i].embedding, &cfg.decode, &mut rng)
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let vocab = &rewards.vocab;
    let itm: Vec<f64> = scenes
        .iter()
        .zip(&captions)
        .map(|(s, c)| cfg.sim_variant.apply(sim_score(s, c, &rewards.oracle, vocab)))
        .collect();
    let sims = match cfg.flavor {
        Flavor::Vlrm => itm,
        Flavor::VlrmRs => {
            let images: Vec<Vec<f64>> = scenes.iter().map(|s| s.embedding.clone()).collect();
            let texts: Vec<Vec<f64>> = captions.iter().map(|c| embed_caption(c, vocab)).collect();
            rs_reward(&images, &texts, &itm, cfg.rs_weight, cfg.rs_eps)?
        }
    };

    workers
        .map(b, |i| {
            let caption = &captions[i];
            let reference = match cfg.flavor {
                Flavor::Vlrm => ref_score(caption, &rewards.reflm),
                Flavor::VlrmRs => 0.0,
            };
            let flags = PenaltyFlags::detect(caption, &rewards.bad_phrases, vocab)?;
            let returns = compute_returns(caption, sims[i], reference, &flags, cfg.gamma)?;
            Ok(Rollout {
                scene: i,
                caption: caption.clone(),
                sim: sims[i],
                reference,
                flags,
                returns,
            })
        })
        .into_iter()
        .collect()
}

/// Returns, pre-update values, advantages and their batch-normalized form.
/// Row `i` holds exactly the valid positions of caption `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub returns: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    /// Mean and population standard deviation of the advantages.
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation over every entry of ragged rows.
pub fn pooled_mean_std(rows: &[Vec<f64>]) -> (f64, f64) {
    let n = rows.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let mean = rows.iter().flatten().sum::<f64>() / n;
    let var = rows.iter().flatten().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AdvantageBatch {
    pub fn new(returns: Vec<Vec<f64>>, values: Vec<Vec<f64>>, eps: f64) -> Result<Self> {
        if returns.len() != values.len() || returns.iter().zip(&values).any(|(r, v)| r.len() != v.len()) {
            return Err(contract("returns and values must have matching shapes"));
        }
        let advantages: Vec<Vec<f64>> = returns
            .iter()
            .zip(&values)
            .map(|(r, v)| r.iter().zip(v).map(|(r, v)| r - v).collect())
            .collect();
        let (mean, std) = pooled_mean_std(&advantages);
        let normalized = advantages
            .iter()
            .map(|row| row.iter().map(|a| (a - mean) / (std + eps)).collect())
            .collect();
        Ok(AdvantageBatch {
            returns,
            values,
            advantages,
            normalized,
            mean,
            std,
        })
    }

    /// Padded 0/1 validity mask, `batch x max_len`.
    pub fn mask(&self) -> Vec<Vec<u8>> {
        let width = self.returns.iter().map(Vec::len).max().unwrap_or(0);
        self.returns
            .iter()
            .map(|r| (0..width).map(|k| u8::from(k < r.len())).collect())
            .collect()
    }

    pub fn normalized_stats(&self) -> (f64, f64) {
        pooled_mean_std(&self.normalized)
    }
}

fn ensure_finite(what: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {x}")))
    }
}

/// Regresses values onto returns and takes one optimizer step on the value
/// adapters and head. Advantages use the values from before the update.
#[allow(clippy::too_many_arguments)]
pub fn rl_step2_value(
    policy: &mut PolicyNet,
    head: &mut ValueHead,
    opt: &mut Adam,
    scenes: &[&Scene],
    batch: &[Rollout],
    lr: f64,
    cfg: &TrainConfig,
    workers: &Workers,
) -> Result<(AdvantageBatch, f64)> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let snapshot: &PolicyNet = policy;
    let per_seq = workers.map(batch.len(), |i| {
        let r = &batch[i];
        let scene = scenes.get(r.scene).ok_or_else(|| contract("rollout scene out of range"))?;
        snapshot.value_loss_grad(head, &scene.embedding, r.caption.ids(), &r.returns.returns)
    });
    let mut total = Gradients::default();
    let mut loss = 0.0;
    let mut values = Vec::with_capacity(batch.len());
    for item in per_seq {
        let (l, v, g) = item?;
        loss += l;
        values.push(v);
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    loss /= n;
    ensure_finite("value loss", loss)?;
    total.scale(1.0 / n);
    let mut grads = total.value_params().ok_or_else(|| contract("missing value gradients"))?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("value gradient".into()));
    }
    clip_gradients(&mut grads, cfg.clip_mode, cfg.grad_clip);

    let mut params = ValueParams {
        adapter: policy.adapter.clone(),
        head: head.clone(),
    };
    opt.step(&mut params, &grads, lr);
    policy.adapter = params.adapter;
    *head = params.head;

    let returns = batch.iter().map(|r| r.returns.returns.clone()).collect();
    Ok((AdvantageBatch::new(returns, values, cfg.adv_eps)?, loss))
}

/// One optimizer step on the generative partition for
/// `-(1/n) sum_k f(p_k) M_k`, averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn rl_step3_policy(
    policy: &mut PolicyNet,
    opt: &mut Adam,
    scenes: &[&Scene],
    batch: &[Rollout],
    adv: &AdvantageBatch,
    lr: f64,
    cfg: &TrainConfig,
    workers: &Workers,
) -> Result<f64> {
    if batch.len() != adv.normalized.len() {
        return Err(contract("advantages do not match the batch"));
    }
    if adv.normalized.iter().flatten().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("normalized advantage".into()));
    }
    let snapshot: &PolicyNet = policy;
    let per_seq = workers.map(batch.len(), |i| {
        let r = &batch[i];
        let scene = scenes.get(r.scene).ok_or_else(|| contract("rollout scene out of range"))?;
        snapshot.policy_loss_grad(&scene.embedding, r.caption.ids(), &adv.normalized[i], cfg.policy_loss, false)
    });
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for item in per_seq {
        let (l, g) = item?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    loss /= n;
    ensure_finite("policy loss", loss)?;
    total.scale(1.0 / n);
    let mut grads = total.generative.ok_or_else(|| contract("missing generative gradients"))?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    clip_gradients(&mut grads, cfg.clip_mode, cfg.grad_clip);
    opt.step(&mut policy.generative, &grads, lr);
    Ok(loss)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    /// Mean over captions of the first-token return.
    pub mean_return: f64,
    pub mean_sim: f64,
    pub mean_ref: f64,
    pub bad_count: usize,
    pub repeat_count: usize,
    pub noeos_count: usize,
    pub loss_v: f64,
    pub loss_p: f64,
    pub mean_length: f64,
    pub adv_std: f64,
    pub norm_adv_mean: f64,
    pub norm_adv_std: f64,
    /// Seconds spent on this step.
    pub wallclock: f64,
}

/// RL state: policy, value head, optimizer moments and step counter.
#[derive(Debug)]
pub struct RlTrainer {
    pub config: TrainConfig,
    pub policy: PolicyNet,
    pub head: ValueHead,
    pub opt_generative: Adam,
    pub opt_value: Adam,
    pub step: u64,
    workers: Workers,
}

impl RlTrainer {
    pub fn new(config: TrainConfig, policy: PolicyNet, workers: Workers) -> Result<Self> {
        config.validate()?;
        let head = ValueHead::for_policy(&policy);
        let opt_generative = Adam::new(&policy.generative);
        let opt_value = Adam::new(&ValueParams {
            adapter: policy.adapter.clone(),
            head: head.clone(),
        });
        Ok(RlTrainer {
            config,
            policy,
            head,
            opt_generative,
            opt_value,
            step: 0,
            workers,
        })
    }

    /// Starts from a warm-start checkpoint, or resumes an RL checkpoint made
    /// under the same configuration.
    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint, workers: Workers) -> Result<Self> {
        match ckpt.kind {
            CheckpointKind::Pretrain => Self::new(config, ckpt.policy, workers),
            CheckpointKind::Rl => {
                config.validate()?;
                let expected = config.hash();
                if ckpt.config_hash != expected {
                    return Err(Error::HashMismatch {
                        expected,
                        found: ckpt.config_hash,
                    });
                }
                let head = ckpt.value_head.ok_or_else(|| Error::Format("RL checkpoint without value head".into()))?;
                let opt = ckpt.optimizer.ok_or_else(|| Error::Format("RL checkpoint without optimizer state".into()))?;
                Ok(RlTrainer {
                    config,
                    policy: ckpt.policy,
                    head,
                    opt_generative: opt.generative,
                    opt_value: opt.value,
                    step: ckpt.step,
                    workers,
                })
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Rl,
            config_hash: self.config.hash(),
            step: self.step,
            seed: self.config.seed,
            policy: self.policy.clone(),
            value_head: Some(self.head.clone()),
            optimizer: Some(OptimizerState {
                generative: self.opt_generative.clone(),
                value: self.opt_value.clone(),
            }),
        }
    }

    /// Scenes for the current step, drawn without replacement.
    pub fn batch_indices(&self, n_scenes: usize) -> Result<Vec<usize>> {
        let b = self.config.batch_size;
        if b > n_scenes {
            return Err(contract(format!("batch of {b} from only {n_scenes} scenes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, self.step, BATCH_STREAM]));
        Ok(rand::seq::index::sample(&mut rng, n_scenes, b).into_vec())
    }

    /// Runs steps 1 to 3 once and advances the step counter.
    pub fn step(&mut self, scenes: &[Scene], rewards: &RewardSetup) -> Result<StepMetrics> {
        let started = Instant::now();
        let lr = self.config.lr_at(self.step);
        let batch_scenes: Vec<&Scene> = self.batch_indices(scenes.len())?.into_iter().map(|i| &scenes[i]).collect();
        let rollouts = rl_step1_generate(&self.policy, &batch_scenes, rewards, &self.config, self.step, &self.workers)?;
        let (adv, loss_v) = rl_step2_value(
            &mut self.policy,
            &mut self.head,
            &mut self.opt_value,
            &batch_scenes,
            &rollouts,
            lr,
            &self.config,
            &self.workers,
        )?;
        let loss_p = rl_step3_policy(
            &mut self.policy,
            &mut self.opt_generative,
            &batch_scenes,
            &rollouts,
            &adv,
            lr,
            &self.config,
            &self.workers,
        )?;
        let n = rollouts.len() as f64;
        let (norm_adv_mean, norm_adv_std) = adv.normalized_stats();
        let metrics = StepMetrics {
            step: self.step,
            lr,
            mean_return: rollouts.iter().map(|r| r.returns.returns[0]).sum::<f64>() / n,
            mean_sim: rollouts.iter().map(|r| r.sim).sum::<f64>() / n,
            mean_ref: rollouts.iter().map(|r| r.reference).sum::<f64>() / n,
            bad_count: rollouts.iter().map(|r| r.flags.bad_count()).sum(),
            repeat_count: rollouts.iter().map(|r| r.flags.repeat_count()).sum(),
            noeos_count: rollouts.iter().map(|r| r.flags.noeos as usize).sum(),
            loss_v,
            loss_p,
            mean_length: rollouts.iter().map(|r| r.caption.len()).sum::<usize>() as f64 / n,
            adv_std: adv.std,
            norm_adv_mean,
            norm_adv_std,
            wallclock: started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Steps until `trainer.step == until`, calling `on_step` after each step.
pub fn train_loop<F>(
    trainer: &mut RlTrainer,
    scenes: &[Scene],
    rewards: &RewardSetup,
    until: u64,
    mut on_step: F,
) -> Result<Vec<StepMetrics>>
where
    F: FnMut(&StepMetrics, &RlTrainer) -> Result<()>,
{
    let mut log = Vec::new();
    while trainer.step < until {
        let m = trainer.step(scenes, rewards)?;
        on_step(&m, trainer)?;
        log.push(m);
    }
    Ok(log)
}
