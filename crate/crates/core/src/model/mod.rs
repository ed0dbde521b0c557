//! The captioning policy, its value head with value-only adapters, and
//! decoding.
//!
//! Parameters are split into partitions (see [`Partition`]): the generative
//! projections trained by the policy loss, a recurrent core that stays
//! fixed during RL, and value-side adapters plus head trained by the value
//! loss. Adapters never enter the generation path.

mod decode;
mod net;
mod tensor;

pub use decode::{
    beam_search, blocks_ngram, decode, random_table_model, sample, topk_distribution, BeamOutput, DecodeConfig,
    DecodeMode, FnModel, PolicyStepper, StepModel,
};
pub use net::{
    AdapterParams, CoreParams, Dense, Forward, GenerativeParams, Gradients, ModelConfig, ParamGroup, Partition,
    PolicyLoss, PolicyNet, ValueHead, ValueParams,
};
pub use tensor::{log_softmax, softmax, Mat};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcore::{CorpusConfig, TokenId, Vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_vocab() -> Vocab {
        let words = |l: &[&str]| l.iter().map(|w| w.to_string()).collect();
        Vocab::build(&CorpusConfig {
            articles: words(&["a"]),
            prepositions: words(&["in"]),
            colors: words(&["red", "blue"]),
            objects: words(&["dog", "cat"]),
            places: words(&["park"]),
            filler: words(&["and"]),
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny(seed: u64) -> (Vocab, PolicyNet, ValueHead, Vec<f64>) {
        let vocab = tiny_vocab();
        let cfg = ModelConfig {
            hidden: 6,
            embed: 4,
            adapter_rank: 2,
            head_width: 5,
            head_depth: 2,
            init_seed: seed,
        };
        let mut policy = PolicyNet::new(&cfg, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in policy.adapter.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        let mut head = ValueHead::for_policy(&policy);
        for t in head.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        let mut emb: Vec<f64> = (0..vocab.embedding_dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let n = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
        emb.iter_mut().for_each(|x| *x /= n);
        (vocab, policy, head, emb)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    fn check_group<P: ParamGroup>(
        params: &mut P,
        analytic: &P,
        mut loss: impl FnMut(&P) -> f64,
    ) {
        let h = 1e-5;
        let n_tensors = params.tensors().len();
        for t in 0..n_tensors {
            let len = params.tensors()[t].len();
            for i in 0..len {
                let orig = params.tensors()[t][i];
                params.tensors_mut()[t][i] = orig + h;
                let up = loss(params);
                params.tensors_mut()[t][i] = orig - h;
                let down = loss(params);
                params.tensors_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.tensors()[t][i];
                assert!(rel_err(a, numeric) < 1e-4, "tensor {t} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let (vocab, mut policy, _, emb) = tiny(1);
        policy.generative.out_w.data.fill(0.0);
        policy.generative.out_b.fill(0.0);
        let seq = vocab.tokenize("a red dog").unwrap();
        let fwd = policy.forward_ids(&emb, seq.ids()).unwrap();
        for logits in &fwd.logits {
            let p = softmax(logits);
            let u = 1.0 / policy.n_out() as f64;
            assert!(p.iter().all(|x| (x - u).abs() < 1e-15));
        }
    }

    #[test]
    fn adapters_do_not_touch_generation() {
        let (vocab, mut policy, _, emb) = tiny(2);
        let seq = vocab.tokenize("a red dog in a park").unwrap();
        let before = policy.forward_ids(&emb, seq.ids()).unwrap();
        for t in policy.adapter.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x * 3.0 + 0.7);
        }
        let after = policy.forward_ids(&emb, seq.ids()).unwrap();
        assert_eq!(before.logits, after.logits);
    }

    #[test]
    fn zero_adapters_reproduce_generation_states() {
        let (vocab, mut policy, head, emb) = tiny(3);
        policy.adapter.in_b.data.fill(0.0);
        policy.adapter.rec_b.data.fill(0.0);
        let seq = vocab.tokenize("a blue cat").unwrap();
        let fwd = policy.forward_ids(&emb, seq.ids()).unwrap();
        let values = policy.values_ids(&head, &emb, seq.ids()).unwrap();
        for (h, v) in fwd.hidden.iter().zip(values) {
            assert_eq!(head.forward(h).0, v);
        }
    }

    #[test]
    fn logits_finite_and_normalized_under_random_draws() {
        let vocab = tiny_vocab();
        let seq = vocab.tokenize("a red dog and a cat in park").unwrap();
        for seed in 0..1000 {
            let (_, mut policy, _, emb) = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in policy.generative.tensors_mut().into_iter().chain(policy.core.tensors_mut()) {
                t.iter_mut().for_each(|x| *x = rng.gen_range(-10.0..10.0));
            }
            let fwd = policy.forward_ids(&emb, seq.ids()).unwrap();
            for logits in &fwd.logits {
                assert!(logits.iter().all(|x| x.is_finite()));
                assert!((softmax(logits).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fresh_value_head_is_zero() {
        let (vocab, policy, _, emb) = tiny(4);
        let head = ValueHead::for_policy(&policy);
        let seq = vocab.tokenize("a dog in park").unwrap();
        let v = policy.values_ids(&head, &emb, seq.ids()).unwrap();
        assert_eq!(v.len(), seq.len());
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_errors() {
        let (vocab, policy, _, emb) = tiny(5);
        let seq = vocab.tokenize("a dog").unwrap();
        assert!(policy.forward_ids(&emb[1..], seq.ids()).is_err());
        assert!(policy.forward_ids(&emb, &[vocab.bos]).is_err());
        assert!(policy.forward_ids(&emb, &[]).is_err());
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences() {
        let (vocab, mut policy, mut head, emb) = tiny(6);
        let seq = vocab.tokenize("a red").unwrap();
        let returns = [0.7, -1.2, 2.0];
        let (_, _, grads) = policy.value_loss_grad(&head, &emb, seq.ids(), &returns).unwrap();
        assert!(!grads.has(Partition::Generative) && !grads.has(Partition::FrozenCore));
        let g_adapter = grads.adapter.unwrap();
        let g_head = grads.head.unwrap();
        let head_copy = head.clone();
        let mut adapter = policy.adapter.clone();
        check_group(&mut adapter, &g_adapter, |a| {
            let mut p = policy.clone();
            p.adapter = a.clone();
            p.value_loss_grad(&head_copy, &emb, seq.ids(), &returns).unwrap().0
        });
        let p = policy.clone();
        check_group(&mut head, &g_head, |h| p.value_loss_grad(h, &emb, seq.ids(), &returns).unwrap().0);
        policy.adapter = adapter;
    }

    #[test]
    fn policy_loss_gradient_matches_finite_differences() {
        for kind in [PolicyLoss::Prob, PolicyLoss::LogProb] {
            let (vocab, policy, _, emb) = tiny(7);
            let seq = vocab.tokenize("a blue cat").unwrap();
            let weights = [0.5, -1.5, 1.0, 0.25];
            let (_, grads) = policy.policy_loss_grad(&emb, seq.ids(), &weights, kind, true).unwrap();
            let loss_with = |p: &PolicyNet| p.policy_loss_grad(&emb, seq.ids(), &weights, kind, false).unwrap().0;
            let mut generative = policy.generative.clone();
            check_group(&mut generative, grads.generative.as_ref().unwrap(), |g| {
                let mut p = policy.clone();
                p.generative = g.clone();
                loss_with(&p)
            });
            let mut core = policy.core.clone();
            check_group(&mut core, grads.core.as_ref().unwrap(), |c| {
                let mut p = policy.clone();
                p.core = c.clone();
                loss_with(&p)
            });
            let (_, frozen) = policy.policy_loss_grad(&emb, seq.ids(), &weights, kind, false).unwrap();
            assert!(frozen.core.is_none() && frozen.adapter.is_none() && frozen.head.is_none());
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (vocab, policy, _, emb) = tiny(8);
        let seq = vocab.tokenize("a dog").unwrap();
        let (loss, grads) = policy
            .policy_loss_grad(&emb, seq.ids(), &[0.0; 3], PolicyLoss::Prob, false)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.generative.unwrap().tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    /// Argmax decoding; `<eos>` is not allowed as the first token.
    fn greedy(policy: &PolicyNet, emb: &[f64], max: usize) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for _ in 0..max {
            let mut prefix = ids.clone();
            prefix.push(policy.eos);
            let fwd = policy.forward_ids(emb, &prefix).unwrap();
            let mut logits = fwd.logits.last().unwrap().clone();
            if ids.is_empty() {
                logits[policy.index_of(policy.eos).unwrap()] = f64::NEG_INFINITY;
            }
            let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            let tok = policy.token_of(best);
            ids.push(tok);
            if tok == policy.eos {
                break;
            }
        }
        ids
    }

    #[test]
    fn top1_sampling_and_single_beam_are_greedy() {
        for seed in 0..20 {
            let (_, policy, _, emb) = tiny(seed);
            let expected = greedy(&policy, &emb, 12);
            let cfg = DecodeConfig {
                top_k: 1,
                min_new_tokens: 1,
                max_new_tokens: 12,
                ..DecodeConfig::training()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = decode(&policy, &emb, &cfg, &mut rng).unwrap();
            assert_eq!(sampled.ids(), &expected[..]);
            let beam_cfg = DecodeConfig {
                min_new_tokens: 1,
                max_new_tokens: 12,
                ..DecodeConfig::greedy()
            };
            let beamed = decode(&policy, &emb, &beam_cfg, &mut rng).unwrap();
            assert_eq!(beamed.ids(), &expected[..]);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (_, policy, _, emb) = tiny(9);
        let cfg = DecodeConfig {
            max_new_tokens: 15,
            ..DecodeConfig::training()
        };
        let a = decode(&policy, &emb, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = decode(&policy, &emb, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logprobs().unwrap().len(), a.len());
    }

    #[test]
    fn blocking_helper() {
        assert!(blocks_ngram(&[1, 2, 3, 1], 2, 2));
        assert!(!blocks_ngram(&[1, 2, 3, 1], 3, 2));
        assert!(!blocks_ngram(&[1, 2], 2, 0));
        assert!(blocks_ngram(&[4, 4], 4, 1));
    }

    #[test]
    fn beam_without_eos_returns_unfinished() {
        let model = FnModel {
            f: |_p: &[usize]| vec![0.0, 5.0, -50.0],
            eos: 2,
        };
        let cfg = DecodeConfig {
            num_beams: 2,
            min_new_tokens: 1,
            max_new_tokens: 3,
            no_repeat_ngram_size: 0,
            ..DecodeConfig::inference()
        };
        let out = beam_search(&model, &cfg);
        assert_eq!(out.tokens.len(), 3);
        // eos can still finish at the last position but is far worse than continuing
        assert!(out.tokens.has_eos() || out.tokens.ids().iter().all(|&t| t != 2));
    }

    #[test]
    fn decode_config_validation() {
        let mut cfg = DecodeConfig::inference();
        assert!(cfg.validate().is_ok());
        cfg.top_k = 0;
        assert!(cfg.validate().is_err());
        let cfg = DecodeConfig {
            min_new_tokens: 5,
            max_new_tokens: 4,
            ..DecodeConfig::inference()
        };
        assert!(cfg.validate().is_err());
        let cfg = DecodeConfig {
            temperature: 0.0,
            ..DecodeConfig::training()
        };
        assert!(cfg.validate().is_err());
    }
}
