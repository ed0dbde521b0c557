use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{log_softmax, Mat};
use crate::error::{contract, Result};
use crate::textcore::{Scene, TokenId, TokenSeq, Vocab};

/// Sizes of the policy and value networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub adapter_rank: usize,
    pub head_width: usize,
    /// Hidden layers in the value head; 0 gives a single linear layer.
    pub head_depth: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            embed: 32,
            adapter_rank: 4,
            head_width: 64,
            head_depth: 3,
            init_seed: 1,
        }
    }
}

/// Names the disjoint parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Scene projection and output projection: updated by the policy loss.
    Generative,
    /// Token embeddings and recurrent weights: fixed during RL.
    FrozenCore,
    /// Low-rank adapters on the core, used only when computing values.
    ValueAdapter,
    ValueHead,
}

/// A group of tensors that an optimizer can walk in a fixed order.
pub trait ParamGroup: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, factor: f64) {
        self.tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|x| *x *= factor));
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    /// `hidden x scene_dim`
    pub scene_w: Mat,
    pub scene_b: Vec<f64>,
    /// `n_out x hidden`
    pub out_w: Mat,
    pub out_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreParams {
    /// `vocab x embed`
    pub embed: Mat,
    /// `hidden x embed`
    pub in_w: Mat,
    /// `hidden x hidden`
    pub rec_w: Mat,
    pub bias: Vec<f64>,
}

/// `W + B A` corrections to the core's input and recurrent matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    /// `rank x embed`
    pub in_a: Mat,
    /// `hidden x rank`
    pub in_b: Mat,
    /// `rank x hidden`
    pub rec_a: Mat,
    /// `hidden x rank`
    pub rec_b: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Feed-forward map from a hidden state to a scalar value estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub layers: Vec<Dense>,
}

impl ParamGroup for GenerativeParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.scene_w.data, &self.scene_b, &self.out_w.data, &self.out_b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.scene_w.data, &mut self.scene_b, &mut self.out_w.data, &mut self.out_b]
    }
}

impl ParamGroup for CoreParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.embed.data, &self.in_w.data, &self.rec_w.data, &self.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.embed.data, &mut self.in_w.data, &mut self.rec_w.data, &mut self.bias]
    }
}

impl ParamGroup for AdapterParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.in_a.data, &self.in_b.data, &self.rec_a.data, &self.rec_b.data]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.in_a.data, &mut self.in_b.data, &mut self.rec_a.data, &mut self.rec_b.data]
    }
}

impl ParamGroup for ValueHead {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [&l.w.data[..], &l.b[..]]).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w.data[..], &mut l.b[..]])
            .collect()
    }
}

/// Value-side trainables: adapters followed by the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub adapter: AdapterParams,
    pub head: ValueHead,
}

impl ParamGroup for ValueParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.adapter.tensors();
        t.extend(self.head.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.adapter.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Parameter gradients keyed by partition. A partition that was not
/// differentiated (stop-gradient or frozen) is `None`, i.e. identically zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub generative: Option<GenerativeParams>,
    pub core: Option<CoreParams>,
    pub adapter: Option<AdapterParams>,
    pub head: Option<ValueHead>,
}

impl Gradients {
    pub fn has(&self, partition: Partition) -> bool {
        match partition {
            Partition::Generative => self.generative.is_some(),
            Partition::FrozenCore => self.core.is_some(),
            Partition::ValueAdapter => self.adapter.is_some(),
            Partition::ValueHead => self.head.is_some(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        fn merge<P: ParamGroup>(a: &mut Option<P>, b: &Option<P>) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(y),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
        merge(&mut self.generative, &other.generative);
        merge(&mut self.core, &other.core);
        merge(&mut self.adapter, &other.adapter);
        merge(&mut self.head, &other.head);
    }

    pub fn scale(&mut self, factor: f64) {
        if let Some(g) = self.generative.as_mut() {
            g.scale(factor);
        }
        if let Some(g) = self.core.as_mut() {
            g.scale(factor);
        }
        if let Some(g) = self.adapter.as_mut() {
            g.scale(factor);
        }
        if let Some(g) = self.head.as_mut() {
            g.scale(factor);
        }
    }

    pub fn value_params(&self) -> Option<ValueParams> {
        Some(ValueParams {
            adapter: self.adapter.clone()?,
            head: self.head.clone()?,
        })
    }
}

/// Form of `p_k` entering the policy loss `-(1/n) sum_k f(p_k) M_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyLoss {
    /// `f(p) = p`
    #[default]
    Prob,
    /// `f(p) = log p`
    LogProb,
}

/// Teacher-forced outputs: `logits[k]` scores token `k` given tokens `< k`;
/// `hidden[k]` is the state that produced it.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
}

/// Scene-conditioned recurrent captioner.
///
/// The scene embedding is projected to a context vector that is added to
/// the recurrent pre-activation at every step. Output index `i` scores
/// token id `i + 2` (everything but `<pad>` and `<bos>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub scene_dim: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub generative: GenerativeParams,
    pub core: CoreParams,
    pub adapter: AdapterParams,
}

pub(crate) const OUT_OFFSET: TokenId = 2;

struct CoreGrads {
    in_w: Mat,
    rec_w: Mat,
    bias: Vec<f64>,
    embed: Option<Mat>,
    ctx: Vec<f64>,
}

impl PolicyNet {
    pub fn new(config: &ModelConfig, vocab: &Vocab) -> Result<Self> {
        if vocab.pad != 0 || vocab.bos != 1 {
            return Err(contract("policy expects <pad>=0 and <bos>=1"));
        }
        let (h, e, r) = (config.hidden, config.embed, config.adapter_rank);
        if h == 0 || e == 0 || r == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        let v = vocab.len();
        let d = vocab.embedding_dim();
        let n_out = v - OUT_OFFSET as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        Ok(PolicyNet {
            config: config.clone(),
            vocab_size: v,
            scene_dim: d,
            bos: vocab.bos,
            eos: vocab.eos,
            generative: GenerativeParams {
                scene_w: Mat::uniform(h, d, 0.5, &mut rng),
                scene_b: vec![0.0; h],
                out_w: Mat::uniform(n_out, h, inv(h), &mut rng),
                out_b: vec![0.0; n_out],
            },
            core: CoreParams {
                embed: Mat::uniform(v, e, 1.0, &mut rng),
                in_w: Mat::uniform(h, e, inv(e), &mut rng),
                rec_w: Mat::uniform(h, h, inv(h), &mut rng),
                bias: vec![0.0; h],
            },
            adapter: AdapterParams {
                in_a: Mat::uniform(r, e, inv(e), &mut rng),
                in_b: Mat::zeros(h, r),
                rec_a: Mat::uniform(r, h, inv(h), &mut rng),
                rec_b: Mat::zeros(h, r),
            },
        })
    }

    pub fn n_out(&self) -> usize {
        self.generative.out_b.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden
    }

    pub fn token_of(&self, index: usize) -> TokenId {
        index as TokenId + OUT_OFFSET
    }

    pub fn index_of(&self, token: TokenId) -> Result<usize> {
        if token < OUT_OFFSET || token as usize >= self.vocab_size {
            return Err(contract(format!("token {token} is not an output of the policy")));
        }
        Ok((token - OUT_OFFSET) as usize)
    }

    /// Scene projection added at every recurrent step.
    pub fn context(&self, scene_embedding: &[f64]) -> Result<Vec<f64>> {
        if scene_embedding.len() != self.scene_dim {
            return Err(contract(format!(
                "scene embedding has dimension {}, policy expects {}",
                scene_embedding.len(),
                self.scene_dim
            )));
        }
        let mut ctx = self.generative.scene_b.clone();
        self.generative.scene_w.matvec_acc(scene_embedding, &mut ctx);
        Ok(ctx)
    }

    /// One recurrent step: `tanh(in_w embed[token] + rec_w h + bias + ctx)`.
    pub(crate) fn cell(&self, in_w: &Mat, rec_w: &Mat, ctx: &[f64], h: &[f64], token: TokenId) -> Vec<f64> {
        let mut pre: Vec<f64> = self.core.bias.iter().zip(ctx).map(|(b, c)| b + c).collect();
        in_w.matvec_acc(self.core.embed.row(token as usize), &mut pre);
        rec_w.matvec_acc(h, &mut pre);
        pre.iter_mut().for_each(|x| *x = x.tanh());
        pre
    }

    pub(crate) fn output_logits(&self, h: &[f64]) -> Vec<f64> {
        let mut logits = self.generative.out_b.clone();
        self.generative.out_w.matvec_acc(h, &mut logits);
        logits
    }

    /// Teacher-forcing inputs: `<bos>` followed by all but the last token.
    fn inputs(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        std::iter::once(self.bos)
            .chain(tokens[..tokens.len() - 1].iter().copied())
            .collect()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract("empty token sequence"));
        }
        for &t in tokens {
            self.index_of(t)?;
        }
        Ok(())
    }

    /// States `h_0 = 0, h_1, ..., h_n`.
    fn run_core(&self, in_w: &Mat, rec_w: &Mat, ctx: &[f64], inputs: &[TokenId]) -> Vec<Vec<f64>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(vec![0.0; self.hidden_size()]);
        for &x in inputs {
            let next = self.cell(in_w, rec_w, ctx, states.last().unwrap(), x);
            states.push(next);
        }
        states
    }

    /// Backpropagation through time given `dh[k]`, the loss gradient with
    /// respect to `states[k + 1]`.
    fn backprop_core(
        &self,
        in_w: &Mat,
        rec_w: &Mat,
        states: &[Vec<f64>],
        inputs: &[TokenId],
        dh: &[Vec<f64>],
        want_embed: bool,
    ) -> CoreGrads {
        let h = self.hidden_size();
        let mut g = CoreGrads {
            in_w: Mat::zeros(in_w.rows, in_w.cols),
            rec_w: Mat::zeros(h, h),
            bias: vec![0.0; h],
            embed: want_embed.then(|| Mat::zeros(self.core.embed.rows, self.core.embed.cols)),
            ctx: vec![0.0; h],
        };
        let mut carry = vec![0.0; h];
        for k in (0..inputs.len()).rev() {
            let state = &states[k + 1];
            let dpre: Vec<f64> = (0..h)
                .map(|i| (dh[k][i] + carry[i]) * (1.0 - state[i] * state[i]))
                .collect();
            let x = self.core.embed.row(inputs[k] as usize);
            g.in_w.add_outer(&dpre, x);
            g.rec_w.add_outer(&dpre, &states[k]);
            for i in 0..h {
                g.bias[i] += dpre[i];
                g.ctx[i] += dpre[i];
            }
            if let Some(embed) = g.embed.as_mut() {
                in_w.matvec_t_acc(&dpre, embed.row_mut(inputs[k] as usize));
            }
            carry.fill(0.0);
            rec_w.matvec_t_acc(&dpre, &mut carry);
        }
        g
    }

    pub fn forward(&self, scene: &Scene, tokens: &TokenSeq) -> Result<Forward> {
        self.forward_ids(&scene.embedding, tokens.ids())
    }

    pub fn forward_ids(&self, scene_embedding: &[f64], tokens: &[TokenId]) -> Result<Forward> {
        self.check_tokens(tokens)?;
        let ctx = self.context(scene_embedding)?;
        let states = self.run_core(&self.core.in_w, &self.core.rec_w, &ctx, &self.inputs(tokens));
        let hidden: Vec<Vec<f64>> = states.into_iter().skip(1).collect();
        let logits = hidden.iter().map(|s| self.output_logits(s)).collect();
        Ok(Forward { logits, hidden })
    }

    /// Log-probability of each token under teacher forcing.
    pub fn token_logprobs(&self, scene_embedding: &[f64], tokens: &[TokenId]) -> Result<Vec<f64>> {
        let fwd = self.forward_ids(scene_embedding, tokens)?;
        tokens
            .iter()
            .zip(&fwd.logits)
            .map(|(&t, logits)| Ok(log_softmax(logits)[self.index_of(t)?]))
            .collect()
    }

    /// `-(1/n) sum_k weights[k] * f(p_k)` and its gradient.
    ///
    /// `weights` are constants. The core is differentiated only when
    /// `train_core` is set; otherwise its gradient stays `None`.
    pub fn policy_loss_grad(
        &self,
        scene_embedding: &[f64],
        tokens: &[TokenId],
        weights: &[f64],
        kind: PolicyLoss,
        train_core: bool,
    ) -> Result<(f64, Gradients)> {
        self.check_tokens(tokens)?;
        if weights.len() != tokens.len() {
            return Err(contract("one weight per token required"));
        }
        let n = tokens.len() as f64;
        let ctx = self.context(scene_embedding)?;
        let inputs = self.inputs(tokens);
        let states = self.run_core(&self.core.in_w, &self.core.rec_w, &ctx, &inputs);

        let mut grads = self.generative.zeros_like();
        let mut loss = 0.0;
        let mut dh = Vec::with_capacity(tokens.len());
        for (k, &token) in tokens.iter().enumerate() {
            let state = &states[k + 1];
            let logp = log_softmax(&self.output_logits(state));
            let target = self.index_of(token)?;
            let p = logp[target].exp();
            // d loss / d log p_target
            let coef = match kind {
                PolicyLoss::Prob => {
                    loss -= weights[k] * p / n;
                    -weights[k] * p / n
                }
                PolicyLoss::LogProb => {
                    loss -= weights[k] * logp[target] / n;
                    -weights[k] / n
                }
            };
            let dlogits: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(i, lp)| coef * (f64::from(u8::from(i == target)) - lp.exp()))
                .collect();
            grads.out_w.add_outer(&dlogits, state);
            grads.out_b.iter_mut().zip(&dlogits).for_each(|(b, d)| *b += d);
            let mut dstate = vec![0.0; self.hidden_size()];
            self.generative.out_w.matvec_t_acc(&dlogits, &mut dstate);
            dh.push(dstate);
        }
        let core = self.backprop_core(&self.core.in_w, &self.core.rec_w, &states, &inputs, &dh, train_core);
        grads.scene_w.add_outer(&core.ctx, scene_embedding);
        grads.scene_b.iter_mut().zip(&core.ctx).for_each(|(b, d)| *b += d);
        let core_grads = train_core.then(|| CoreParams {
            embed: core.embed.expect("embed gradient requested"),
            in_w: core.in_w,
            rec_w: core.rec_w,
            bias: core.bias,
        });
        Ok((
            loss,
            Gradients {
                generative: Some(grads),
                core: core_grads,
                ..Default::default()
            },
        ))
    }

    fn adapted(&self) -> (Mat, Mat) {
        let a = &self.adapter;
        (
            self.core.in_w.add(&a.in_b.matmul(&a.in_a)),
            self.core.rec_w.add(&a.rec_b.matmul(&a.rec_a)),
        )
    }

    /// Per-token value estimates from the adapter-augmented core.
    pub fn values(&self, head: &ValueHead, scene: &Scene, tokens: &TokenSeq) -> Result<Vec<f64>> {
        self.values_ids(head, &scene.embedding, tokens.ids())
    }

    pub fn values_ids(&self, head: &ValueHead, scene_embedding: &[f64], tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let ctx = self.context(scene_embedding)?;
        let (in_w, rec_w) = self.adapted();
        let states = self.run_core(&in_w, &rec_w, &ctx, &self.inputs(tokens));
        Ok(states[1..].iter().map(|s| head.forward(s).0).collect())
    }

    /// `(1/n) sum_k (R_k - V_k)^2` with gradients for the adapters and head.
    /// Returns the loss and the (pre-update) values.
    pub fn value_loss_grad(
        &self,
        head: &ValueHead,
        scene_embedding: &[f64],
        tokens: &[TokenId],
        returns: &[f64],
    ) -> Result<(f64, Vec<f64>, Gradients)> {
        self.check_tokens(tokens)?;
        if returns.len() != tokens.len() {
            return Err(contract("one return per token required"));
        }
        let n = tokens.len() as f64;
        // the context is a constant on the value path
        let ctx = self.context(scene_embedding)?;
        let (in_w, rec_w) = self.adapted();
        let inputs = self.inputs(tokens);
        let states = self.run_core(&in_w, &rec_w, &ctx, &inputs);

        let mut head_grads = head.zeros_like();
        let mut values = Vec::with_capacity(tokens.len());
        let mut dh = Vec::with_capacity(tokens.len());
        let mut loss = 0.0;
        for (k, &ret) in returns.iter().enumerate() {
            let (v, acts) = head.forward(&states[k + 1]);
            let err = ret - v;
            loss += err * err / n;
            values.push(v);
            dh.push(head.backward(&acts, -2.0 * err / n, &mut head_grads));
        }
        let core = self.backprop_core(&in_w, &rec_w, &states, &inputs, &dh, false);
        let a = &self.adapter;
        let adapter = AdapterParams {
            in_a: a.in_b.transpose().matmul(&core.in_w),
            in_b: core.in_w.matmul(&a.in_a.transpose()),
            rec_a: a.rec_b.transpose().matmul(&core.rec_w),
            rec_b: core.rec_w.matmul(&a.rec_a.transpose()),
        };
        Ok((
            loss,
            values,
            Gradients {
                adapter: Some(adapter),
                head: Some(head_grads),
                ..Default::default()
            },
        ))
    }
}

impl ValueHead {
    /// `depth` tanh layers of width `width`, then a zero-initialized linear output.
    pub fn new(input: usize, width: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = input;
        for _ in 0..depth {
            layers.push(Dense {
                w: Mat::uniform(width, fan_in, 1.0 / (fan_in as f64).sqrt(), &mut rng),
                b: vec![0.0; width],
            });
            fan_in = width;
        }
        layers.push(Dense {
            w: Mat::zeros(1, fan_in),
            b: vec![0.0],
        });
        ValueHead { layers }
    }

    pub fn for_policy(policy: &PolicyNet) -> Self {
        let c = &policy.config;
        ValueHead::new(c.hidden, c.head_width, c.head_depth, c.init_seed.wrapping_add(0x7A1))
    }

    /// Output value and the input of every layer.
    pub fn forward(&self, h: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut x = h.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.b.clone();
            layer.w.matvec_acc(&x, &mut y);
            if l < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(std::mem::replace(&mut x, y));
        }
        (x[0], acts)
    }

    /// Accumulates parameter gradients for output gradient `dv` and returns
    /// the gradient with respect to the input state.
    pub fn backward(&self, acts: &[Vec<f64>], dv: f64, grads: &mut ValueHead) -> Vec<f64> {
        let mut g = vec![dv];
        for l in (0..self.layers.len()).rev() {
            let input = &acts[l];
            grads.layers[l].w.add_outer(&g, input);
            grads.layers[l].b.iter_mut().zip(&g).for_each(|(b, d)| *b += d);
            let mut gin = vec![0.0; input.len()];
            self.layers[l].w.matvec_t_acc(&g, &mut gin);
            if l > 0 {
                gin.iter_mut().zip(input).for_each(|(d, a)| *d *= 1.0 - a * a);
            }
            g = gin;
        }
        g
    }
}
