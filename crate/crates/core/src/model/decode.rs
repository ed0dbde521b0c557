//! Top-k sampling and beam search with n-gram blocking.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::PolicyNet;
use super::tensor::{log_softmax, Mat};
use crate::error::{config_err, Result};
use crate::textcore::{TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    TopkSample,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub top_k: usize,
    /// Sampling temperature; beam search scores untempered log-probabilities.
    pub temperature: f64,
    pub num_beams: usize,
    pub min_new_tokens: usize,
    /// Upper bound on generated tokens, `<eos>` included.
    pub max_new_tokens: usize,
    /// 0 disables blocking.
    pub no_repeat_ngram_size: usize,
    pub seed: u64,
}

impl DecodeConfig {
    /// Sampling used while collecting training captions.
    pub fn training() -> Self {
        DecodeConfig {
            mode: DecodeMode::TopkSample,
            top_k: 6,
            temperature: 2.0,
            num_beams: 1,
            min_new_tokens: 1,
            max_new_tokens: 60,
            no_repeat_ngram_size: 0,
            seed: 0,
        }
    }

    /// Deterministic beam search used for evaluation.
    pub fn inference() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            top_k: 1,
            temperature: 1.0,
            num_beams: 5,
            min_new_tokens: 4,
            max_new_tokens: 60,
            no_repeat_ngram_size: 2,
            seed: 0,
        }
    }

    /// Greedy decoding: a single beam without blocking.
    pub fn greedy() -> Self {
        DecodeConfig {
            num_beams: 1,
            no_repeat_ngram_size: 0,
            ..Self::inference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(config_err("top_k must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(config_err("temperature must be positive"));
        }
        if self.num_beams < 1 {
            return Err(config_err("num_beams must be at least 1"));
        }
        if self.min_new_tokens < 1 || self.max_new_tokens < self.min_new_tokens {
            return Err(config_err("need max_new_tokens >= min_new_tokens >= 1"));
        }
        Ok(())
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::inference()
    }
}

/// Autoregressive next-token scorer over output indices `0..n`.
pub trait StepModel {
    type State: Clone;
    fn start(&self) -> Self::State;
    /// Logits over output indices for the next token.
    fn logits<'s>(&self, state: &'s Self::State) -> &'s [f64];
    fn advance(&self, state: &Self::State, index: usize) -> Self::State;
    fn token_of(&self, index: usize) -> TokenId;
    fn eos_index(&self) -> usize;
}

/// A policy bound to one scene.
pub struct PolicyStepper<'a> {
    policy: &'a PolicyNet,
    ctx: Vec<f64>,
}

#[derive(Clone)]
pub struct PolicyState {
    h: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> PolicyStepper<'a> {
    pub fn new(policy: &'a PolicyNet, scene_embedding: &[f64]) -> Result<Self> {
        Ok(PolicyStepper {
            policy,
            ctx: policy.context(scene_embedding)?,
        })
    }

    fn feed(&self, h: &[f64], token: TokenId) -> PolicyState {
        let core = &self.policy.core;
        let h = self.policy.cell(&core.in_w, &core.rec_w, &self.ctx, h, token);
        let logits = self.policy.output_logits(&h);
        PolicyState { h, logits }
    }
}

impl StepModel for PolicyStepper<'_> {
    type State = PolicyState;

    fn start(&self) -> PolicyState {
        self.feed(&vec![0.0; self.policy.hidden_size()], self.policy.bos)
    }

    fn logits<'s>(&self, state: &'s PolicyState) -> &'s [f64] {
        &state.logits
    }

    fn advance(&self, state: &PolicyState, index: usize) -> PolicyState {
        self.feed(&state.h, self.policy.token_of(index))
    }

    fn token_of(&self, index: usize) -> TokenId {
        self.policy.token_of(index)
    }

    fn eos_index(&self) -> usize {
        (self.policy.eos - super::net::OUT_OFFSET) as usize
    }
}

/// Table-driven model for tests: `logits(prefix)` is looked up by prefix.
pub struct FnModel<F: Fn(&[usize]) -> Vec<f64>> {
    pub f: F,
    pub eos: usize,
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepModel for FnModel<F> {
    type State = (Vec<usize>, Vec<f64>);

    fn start(&self) -> Self::State {
        (Vec::new(), (self.f)(&[]))
    }

    fn logits<'s>(&self, state: &'s Self::State) -> &'s [f64] {
        &state.1
    }

    fn advance(&self, state: &Self::State, index: usize) -> Self::State {
        let mut prefix = state.0.clone();
        prefix.push(index);
        let logits = (self.f)(&prefix);
        (prefix, logits)
    }

    fn token_of(&self, index: usize) -> TokenId {
        index as TokenId
    }

    fn eos_index(&self) -> usize {
        self.eos
    }
}

/// Output indices ordered by logit (descending), ties by index.
fn ranked(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// The tempered top-k distribution: `(index, probability)` pairs.
pub fn topk_distribution(logits: &[f64], top_k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let keep: Vec<usize> = ranked(logits)
        .into_iter()
        .filter(|&i| logits[i] > f64::NEG_INFINITY)
        .take(top_k)
        .collect();
    let scaled: Vec<f64> = keep.iter().map(|&i| logits[i] / temperature).collect();
    keep.into_iter().zip(log_softmax(&scaled).into_iter().map(f64::exp)).collect()
}

/// Samples one caption. Records the log-probability of each chosen token
/// under the distribution it was drawn from.
pub fn sample<M: StepModel, R: Rng + ?Sized>(model: &M, cfg: &DecodeConfig, rng: &mut R) -> TokenSeq {
    let eos = model.eos_index();
    let mut state = model.start();
    let mut ids = Vec::new();
    let mut logprobs = Vec::new();
    let mut has_eos = false;
    while ids.len() < cfg.max_new_tokens {
        let mut logits = model.logits(&state).to_vec();
        if ids.len() < cfg.min_new_tokens {
            logits[eos] = f64::NEG_INFINITY;
        }
        let dist = topk_distribution(&logits, cfg.top_k, cfg.temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = dist[dist.len() - 1];
        for &(i, p) in &dist {
            acc += p;
            if u < acc {
                choice = (i, p);
                break;
            }
        }
        ids.push(model.token_of(choice.0));
        logprobs.push(choice.1.ln());
        if choice.0 == eos {
            has_eos = true;
            break;
        }
        state = model.advance(&state, choice.0);
    }
    TokenSeq::from_ids_unchecked(ids, has_eos).with_logprobs(logprobs)
}

/// True if appending `next` would repeat an n-gram already in `seq`.
pub fn blocks_ngram(seq: &[usize], next: usize, n: usize) -> bool {
    if n == 0 || seq.len() + 1 < n {
        return false;
    }
    let tail = &seq[seq.len() + 1 - n..];
    (0..seq.len() + 1 - n).any(|start| {
        let window = &seq[start..start + n];
        window[..n - 1] == *tail && window[n - 1] == next
    })
}

#[derive(Clone)]
struct Beam<S> {
    indices: Vec<usize>,
    score: f64,
    state: S,
}

/// Beam search result: the caption and its summed log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub tokens: TokenSeq,
    pub score: f64,
}

/// Beam search on summed log-probabilities without length normalization.
///
/// `<eos>` is masked until `min_new_tokens` tokens exist, and candidates
/// that repeat an n-gram of size `no_repeat_ngram_size` are pruned. Search
/// stops once the best finished hypothesis outscores every live beam;
/// scores never increase along a beam, so that hypothesis is final. If no
/// beam finishes within `max_new_tokens`, the best live beam is returned
/// without `<eos>`.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> BeamOutput {
    let eos = model.eos_index();
    let mut live = vec![Beam {
        indices: Vec::new(),
        score: 0.0,
        state: model.start(),
    }];
    let mut best_finished: Option<(Vec<usize>, f64)> = None;

    for _ in 0..cfg.max_new_tokens {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            let logp = log_softmax(model.logits(&beam.state));
            for (i, lp) in logp.iter().enumerate() {
                if i == eos && beam.indices.len() < cfg.min_new_tokens {
                    continue;
                }
                if blocks_ngram(&beam.indices, i, cfg.no_repeat_ngram_size) {
                    continue;
                }
                candidates.push((b, i, beam.score + lp));
            }
        }
        candidates.sort_by(|x, y| {
            y.2.partial_cmp(&x.2)
                .unwrap_or(Ordering::Equal)
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        let mut next = Vec::with_capacity(cfg.num_beams);
        for (b, i, score) in candidates {
            if next.len() == cfg.num_beams {
                break;
            }
            if i == eos {
                if best_finished.as_ref().map_or(true, |(_, s)| score > *s) {
                    let mut indices = live[b].indices.clone();
                    indices.push(i);
                    best_finished = Some((indices, score));
                }
                continue;
            }
            let mut indices = live[b].indices.clone();
            indices.push(i);
            next.push(Beam {
                indices,
                score,
                state: model.advance(&live[b].state, i),
            });
        }
        if next.is_empty() {
            break;
        }
        live = next;
        if let Some((_, best)) = &best_finished {
            if live.iter().all(|beam| beam.score <= *best) {
                break;
            }
        }
    }

    let to_tokens = |indices: &[usize], has_eos: bool| {
        TokenSeq::from_ids_unchecked(indices.iter().map(|&i| model.token_of(i)).collect(), has_eos)
    };
    match best_finished {
        Some((indices, score)) => BeamOutput {
            tokens: to_tokens(&indices, true),
            score,
        },
        None => {
            let best = live
                .into_iter()
                .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal))
                .expect("at least one live beam");
            BeamOutput {
                tokens: to_tokens(&best.indices, false),
                score: best.score,
            }
        }
    }
}

/// Decodes a caption for `scene_embedding` with the mode in `cfg`.
pub fn decode<R: Rng + ?Sized>(
    policy: &PolicyNet,
    scene_embedding: &[f64],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<TokenSeq> {
    cfg.validate()?;
    let stepper = PolicyStepper::new(policy, scene_embedding)?;
    Ok(match cfg.mode {
        DecodeMode::TopkSample => sample(&stepper, cfg, rng),
        DecodeMode::Beam => beam_search(&stepper, cfg).tokens,
    })
}

/// Random-logit table model over `n` outputs used by decoding tests.
///
/// Logits depend on the previous token and on the prefix length, which
/// raises the `<eos>` logit as the caption grows.
#[doc(hidden)]
pub fn random_table_model(n: usize, eos: usize, seed: u64) -> FnModel<impl Fn(&[usize]) -> Vec<f64>> {
    use rand::SeedableRng;
    let weights = Mat::uniform(n + 1, n, 2.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    FnModel {
        f: move |prefix: &[usize]| {
            let last = prefix.last().copied().unwrap_or(n);
            let bump = prefix.len() as f64 * 0.3;
            let mut logits = weights.row(last).to_vec();
            logits[eos] += bump;
            logits
        },
        eos,
    }
}
