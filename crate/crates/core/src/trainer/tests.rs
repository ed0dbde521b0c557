use super::*;
use crate::model::{ModelConfig, ParamGroup, PolicyLoss, PolicyNet, ValueHead, ValueParams};
use crate::scorers::train_reflm;
use crate::textcore::{generate_corpus, CorpusConfig, Scene, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: 12,
        embed: 6,
        adapter_rank: 2,
        head_width: 8,
        head_depth: 2,
        init_seed: 5,
    }
}

struct Fixture {
    setup: RewardSetup,
    data: Vec<(Scene, TokenSeq)>,
    scenes: Vec<Scene>,
    policy: PolicyNet,
}

fn fixture(n: usize) -> Fixture {
    let cfg = CorpusConfig::default();
    let vocab = Vocab::build(&cfg).unwrap();
    let corpus = generate_corpus(3, n, &vocab, &cfg).unwrap();
    let refs: Vec<TokenSeq> = corpus.entries.iter().map(|e| e.1.clone()).collect();
    let reflm = train_reflm(&refs, &vocab, 3, 0.1).unwrap();
    let policy = PolicyNet::new(&small_model(), &vocab).unwrap();
    let scenes = corpus.entries.iter().map(|e| e.0.clone()).collect();
    Fixture {
        setup: RewardSetup {
            vocab,
            oracle: SimOracle::default(),
            reflm,
            bad_phrases: BadPhraseSet::default(),
        },
        data: corpus.entries,
        scenes,
        policy,
    }
}

fn quick_config(flavor: Flavor) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 8,
        lr: 1e-2,
        warmup_steps: 2,
        flavor,
        seed: 11,
        ..TrainConfig::default()
    };
    cfg.decode.max_new_tokens = 12;
    cfg
}

#[test]
fn lr_schedule_matches_warmup() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 0.0);
    assert_eq!(cfg.lr_at(10), 0.5e-5);
    assert_eq!(cfg.lr_at(20), 1e-5);
    assert_eq!(cfg.lr_at(100), 1e-5);
    for s in 0..20 {
        assert!(cfg.lr_at(s) < cfg.lr_at(s + 1));
    }
    let flat = TrainConfig {
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    assert_eq!(flat.lr_at(0), 1e-5);
}

#[test]
fn elementwise_clamp() {
    let f = fixture(2);
    let mut g = f.policy.generative.zeros_like();
    g.out_b[0] = 3.7;
    g.out_b[1] = -3.7;
    g.out_b[2] = 0.4;
    assert_eq!(clip_gradients(&mut g, ClipMode::Elementwise, 1.0), 2);
    assert_eq!(&g.out_b[..3], &[1.0, -1.0, 0.4]);

    let mut n = f.policy.generative.zeros_like();
    n.out_b[0] = 3.0;
    n.out_b[1] = 4.0;
    assert_eq!(clip_gradients(&mut n, ClipMode::GlobalNorm, 1.0), 1);
    assert!((n.out_b[0] - 0.6).abs() < 1e-15 && (n.out_b[1] - 0.8).abs() < 1e-15);
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let f = fixture(2);
    let mut params = f.policy.generative.clone();
    let before = params.clone();
    let mut g = params.zeros_like();
    g.out_b[0] = 1.0;
    g.out_b[1] = -0.25;
    let mut opt = Adam::new(&params);
    opt.step(&mut params, &g, 0.1);
    assert!((params.out_b[0] - (before.out_b[0] - 0.1)).abs() < 1e-7);
    assert!((params.out_b[1] - (before.out_b[1] + 0.1)).abs() < 1e-7);
    assert_eq!(params.out_b[2], before.out_b[2]);
    assert_eq!(params.scene_w, before.scene_w);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 1,
            flavor: Flavor::VlrmRs,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: -1.0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))), "{cfg:?}");
    }
    assert_eq!("vlrm-rs".parse::<Flavor>().unwrap(), Flavor::VlrmRs);
    assert!("ppo".parse::<Flavor>().is_err());
}

#[test]
fn config_hash_ignores_key_order() {
    let a: TrainConfig = serde_json::from_str(r#"{"lr": 0.001, "seed": 4}"#).unwrap();
    let b: TrainConfig = serde_json::from_str(r#"{"seed": 4, "lr": 0.001}"#).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
}

#[test]
fn rs_flavor_rejects_single_caption_batch() {
    let f = fixture(4);
    let cfg = TrainConfig {
        batch_size: 2,
        ..quick_config(Flavor::VlrmRs)
    };
    let one = [&f.scenes[0]];
    let err = rl_step1_generate(&f.policy, &one, &f.setup, &cfg, 0, &Workers::sequential()).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
}

#[test]
fn step1_rollouts_replay_and_rs_has_no_ref() {
    let f = fixture(16);
    let batch: Vec<&Scene> = f.scenes.iter().take(8).collect();
    for flavor in [Flavor::Vlrm, Flavor::VlrmRs] {
        let cfg = quick_config(flavor);
        let before = f.policy.clone();
        let rollouts = rl_step1_generate(&f.policy, &batch, &f.setup, &cfg, 0, &Workers::sequential()).unwrap();
        assert_eq!(f.policy, before);
        assert_eq!(rollouts.len(), 8);
        for r in &rollouts {
            let again = compute_returns(&r.caption, r.sim, r.reference, &r.flags, cfg.gamma).unwrap();
            assert_eq!(again, r.returns);
            if flavor == Flavor::VlrmRs {
                assert_eq!(r.reference, 0.0);
            } else {
                assert!(r.reference < 0.0);
            }
        }
    }
}

use crate::rewardshape::compute_returns;

#[test]
fn penalty_free_caption_returns_are_terminal_reward() {
    let f = fixture(2);
    let cap = f.setup.vocab.tokenize("a red dog in the park").unwrap();
    let flags = crate::rewardshape::PenaltyFlags::detect(&cap, &f.setup.bad_phrases, &f.setup.vocab).unwrap();
    let r = compute_returns(&cap, 1.25, -0.5, &flags, 1.0).unwrap();
    assert!(r.returns.iter().all(|&x| x == 0.75));
}

#[test]
fn advantage_normalization_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let b = rng.gen_range(1..10);
        let mut returns = Vec::new();
        let mut values = Vec::new();
        for _ in 0..b {
            let n = rng.gen_range(1..15);
            returns.push((0..n).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<f64>>());
            values.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        }
        let adv = AdvantageBatch::new(returns.clone(), values.clone(), 1e-8).unwrap();
        if adv.std > 1e-8 {
            let (m, s) = adv.normalized_stats();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "{m} {s}");
        }
        // shift invariance
        let shifted: Vec<Vec<f64>> = returns.iter().map(|r| r.iter().map(|x| x + 3.5).collect()).collect();
        let adv2 = AdvantageBatch::new(shifted, values, 1e-8).unwrap();
        for (a, b) in adv.normalized.iter().flatten().zip(adv2.normalized.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mask = adv.mask();
        assert_eq!(
            mask.iter().flatten().map(|&m| m as usize).sum::<usize>(),
            adv.returns.iter().map(Vec::len).sum::<usize>()
        );
    }
    let flat = AdvantageBatch::new(vec![vec![2.0, 2.0]], vec![vec![0.0, 0.0]], 1e-8).unwrap();
    assert!(flat.normalized.iter().flatten().all(|&m| m == 0.0));
    assert!(AdvantageBatch::new(vec![vec![1.0]], vec![vec![]], 1e-8).is_err());
}

#[test]
fn step2_and_step3_touch_only_their_partitions() {
    let f = fixture(16);
    let cfg = quick_config(Flavor::Vlrm);
    let batch: Vec<&Scene> = f.scenes.iter().take(8).collect();
    let w = Workers::sequential();
    let mut policy = f.policy.clone();
    let mut head = ValueHead::for_policy(&policy);
    let rollouts = rl_step1_generate(&policy, &batch, &f.setup, &cfg, 0, &w).unwrap();

    let mut opt_v = Adam::new(&ValueParams {
        adapter: policy.adapter.clone(),
        head: head.clone(),
    });
    let gen_before = policy.generative.clone();
    let core_before = policy.core.clone();
    let head_before = head.clone();
    let (adv, lv) = rl_step2_value(&mut policy, &mut head, &mut opt_v, &batch, &rollouts, 1e-2, &cfg, &w).unwrap();
    assert!(lv > 0.0);
    assert_eq!(policy.generative, gen_before);
    assert_eq!(policy.core, core_before);
    assert_ne!(head, head_before);
    // the fresh head predicts zero everywhere, so values are pre-update
    assert!(adv.values.iter().flatten().all(|&v| v == 0.0));

    let adapter_before = policy.adapter.clone();
    let head_before = head.clone();
    let mut opt_g = Adam::new(&policy.generative);
    rl_step3_policy(&mut policy, &mut opt_g, &batch, &rollouts, &adv, 1e-2, &cfg, &w).unwrap();
    assert_eq!(policy.adapter, adapter_before);
    assert_eq!(head, head_before);
    assert_eq!(policy.core, core_before);
    assert_ne!(policy.generative, gen_before);
}

#[test]
fn zero_advantages_leave_policy_unchanged() {
    let f = fixture(8);
    let cfg = quick_config(Flavor::Vlrm);
    let batch: Vec<&Scene> = f.scenes.iter().take(4).collect();
    let w = Workers::sequential();
    let rollouts = rl_step1_generate(&f.policy, &batch, &f.setup, &cfg, 0, &w).unwrap();
    let returns: Vec<Vec<f64>> = rollouts.iter().map(|r| vec![1.0; r.caption.len()]).collect();
    let adv = AdvantageBatch::new(returns.clone(), returns, 1e-8).unwrap();
    let mut policy = f.policy.clone();
    let mut opt = Adam::new(&policy.generative);
    let loss = rl_step3_policy(&mut policy, &mut opt, &batch, &rollouts, &adv, 1e-2, &cfg, &w).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(policy, f.policy);
}

#[test]
fn positive_advantage_raises_token_probability() {
    let f = fixture(2);
    let cfg = TrainConfig {
        batch_size: 1,
        ..quick_config(Flavor::Vlrm)
    };
    let scene = &f.scenes[0];
    let token = f.setup.vocab.id("dog").unwrap();
    let cap = TokenSeq::new(vec![token], &f.setup.vocab).unwrap();
    let flags = crate::rewardshape::PenaltyFlags::detect(&cap, &f.setup.bad_phrases, &f.setup.vocab).unwrap();
    let rollout = Rollout {
        scene: 0,
        caption: cap.clone(),
        sim: 1.0,
        reference: 0.0,
        returns: compute_returns(&cap, 1.0, 0.0, &flags, 1.0).unwrap(),
        flags,
    };
    let adv = AdvantageBatch {
        returns: vec![vec![1.0]],
        values: vec![vec![0.0]],
        advantages: vec![vec![1.0]],
        normalized: vec![vec![1.0]],
        mean: 0.0,
        std: 0.0,
    };
    for kind in [PolicyLoss::Prob, PolicyLoss::LogProb] {
        let cfg = TrainConfig {
            policy_loss: kind,
            ..cfg.clone()
        };
        let mut policy = f.policy.clone();
        let p0 = policy.token_logprobs(&scene.embedding, cap.ids()).unwrap()[0];
        let mut opt = Adam::new(&policy.generative);
        rl_step3_policy(&mut policy, &mut opt, &[scene], &[rollout.clone()], &adv, 1e-3, &cfg, &Workers::sequential())
            .unwrap();
        let p1 = policy.token_logprobs(&scene.embedding, cap.ids()).unwrap()[0];
        assert!(p1 > p0, "{kind:?}: {p0} -> {p1}");
    }
}

#[test]
fn mle_memorizes_one_scene_and_zero_epochs_is_identity() {
    let f = fixture(1);
    let cfg = MleConfig {
        epochs: 150,
        lr: 1e-2,
        batch_size: 1,
        ..MleConfig::default()
    };
    let mut policy = f.policy.clone();
    let hist = mle_pretrain(&mut policy, &f.data[..1], &cfg, &Workers::sequential()).unwrap();
    assert!(hist[0] > 1.0);
    assert!(*hist.last().unwrap() < 0.05, "{hist:?}");

    let mut same = f.policy.clone();
    let none = mle_pretrain(
        &mut same,
        &f.data,
        &MleConfig {
            epochs: 0,
            ..MleConfig::default()
        },
        &Workers::sequential(),
    )
    .unwrap();
    assert!(none.is_empty());
    assert_eq!(same, f.policy);
    assert!(mle_pretrain(&mut same, &[], &MleConfig::default(), &Workers::sequential()).is_err());
}

#[test]
fn mle_loss_decreases_and_beats_untrained_on_held_out() {
    let f = fixture(600);
    let (train, held) = f.data.split_at(500);
    let cfg = MleConfig {
        epochs: 3,
        ..MleConfig::default()
    };
    let mut policy = f.policy.clone();
    let base = cross_entropy(&policy, held).unwrap();
    let hist = mle_pretrain(&mut policy, train, &cfg, &Workers::sequential()).unwrap();
    for w in hist.windows(2) {
        assert!(w[1] < w[0] + 0.02, "{hist:?}");
    }
    let after = cross_entropy(&policy, held).unwrap();
    assert!(after < base, "{after} vs {base}");
}

#[test]
fn training_is_deterministic_across_worker_counts_and_resume() {
    let f = fixture(40);
    let cfg = quick_config(Flavor::VlrmRs);
    let run = |workers: usize, split: Option<u64>| -> Checkpoint {
        let mut tr = RlTrainer::new(cfg.clone(), f.policy.clone(), Workers::new(workers).unwrap()).unwrap();
        if let Some(at) = split {
            train_loop(&mut tr, &f.scenes, &f.setup, at, |_, _| Ok(())).unwrap();
            let text = tr.checkpoint().to_json();
            let ckpt = Checkpoint::from_json(&text).unwrap();
            tr = RlTrainer::from_checkpoint(cfg.clone(), ckpt, Workers::new(workers).unwrap()).unwrap();
        }
        train_loop(&mut tr, &f.scenes, &f.setup, 6, |_, _| Ok(())).unwrap();
        tr.checkpoint()
    };
    let reference = run(1, None);
    assert_eq!(reference.step, 6);
    assert_eq!(run(1, None).to_json(), reference.to_json());
    assert_eq!(run(3, None).to_json(), reference.to_json());
    assert_eq!(run(1, Some(3)).to_json(), reference.to_json());
}

#[test]
fn resume_refuses_other_config() {
    let f = fixture(20);
    let cfg = quick_config(Flavor::Vlrm);
    let mut tr = RlTrainer::new(cfg.clone(), f.policy.clone(), Workers::sequential()).unwrap();
    tr.step(&f.scenes, &f.setup).unwrap();
    let ckpt = tr.checkpoint();
    let other = TrainConfig { lr: 0.5, ..cfg };
    let err = RlTrainer::from_checkpoint(other, ckpt, Workers::sequential()).unwrap_err();
    assert!(matches!(err, crate::Error::HashMismatch { .. }));
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let f = fixture(20);
    let mut tr = RlTrainer::new(quick_config(Flavor::Vlrm), f.policy.clone(), Workers::sequential()).unwrap();
    tr.step(&f.scenes, &f.setup).unwrap();
    let text = tr.checkpoint().to_json();
    assert_eq!(Checkpoint::from_json(&text).unwrap().to_json(), text);
    let mut bad: serde_json::Value = serde_json::from_str(&text).unwrap();
    bad["format"] = "something-else".into();
    assert!(matches!(Checkpoint::from_json(&bad.to_string()), Err(crate::Error::Format(_))));
}

#[test]
fn warmup_visible_in_metrics_and_adapter_never_affects_sampling() {
    let f = fixture(40);
    let cfg = TrainConfig {
        warmup_steps: 4,
        ..quick_config(Flavor::Vlrm)
    };
    let mut tr = RlTrainer::new(cfg.clone(), f.policy.clone(), Workers::sequential()).unwrap();
    let core = tr.policy.core.clone();
    let log = train_loop(&mut tr, &f.scenes, &f.setup, 6, |_, _| Ok(())).unwrap();
    let lrs: Vec<f64> = log.iter().map(|m| m.lr).collect();
    assert_eq!(lrs, (0..6).map(|s| cfg.lr_at(s)).collect::<Vec<_>>());
    assert_eq!(tr.policy.core, core);

    let batch: Vec<&Scene> = f.scenes.iter().take(8).collect();
    let a = rl_step1_generate(&tr.policy, &batch, &f.setup, &cfg, 9, &Workers::sequential()).unwrap();
    let mut perturbed = tr.policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    perturbed
        .adapter
        .tensors_mut()
        .into_iter()
        .for_each(|t| t.iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0)));
    let b = rl_step1_generate(&perturbed, &batch, &f.setup, &cfg, 9, &Workers::sequential()).unwrap();
    assert_eq!(a, b);
}

