use std::path::Path;

use serde::Serialize;
use vlrm_core::eval::{caption_stats, retrieval_eval, CaptionStats, RetrievalReport};
use vlrm_core::model::{decode, DecodeConfig, PolicyNet};
use vlrm_core::rewardshape::{compute_returns, PenaltyFlags};
use vlrm_core::scorers::{ref_score, sim_score};
use vlrm_core::textcore::{generate_corpus, write_corpus, Corpus, CorpusHeader, Scene, TokenSeq, Vocab};
use vlrm_core::trainer::{
    mle_pretrain, train_loop, Checkpoint, CheckpointKind, RewardSetup, RlTrainer, Workers,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::*;
use crate::{DecodeChoice, EvalArgs, GenCorpusArgs, PretrainArgs, RlTrainArgs, ScoreArgs, Split};

fn corpus_bytes(corpus: &Corpus, vocab: &Vocab) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus, vocab)?;
    Ok(buf)
}

pub fn gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    if args.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    if !args.out.is_dir() {
        return Err(CliError::Usage(format!("output directory {} does not exist", args.out.display())));
    }
    let cfg = RunConfig::load(args.config.as_deref())?;
    let vocab = Vocab::build(&cfg.corpus)?;
    let mut corpus = generate_corpus(args.seed, args.scenes + args.holdout, &vocab, &cfg.corpus)?;
    let held_entries = corpus.entries.split_off(args.scenes);
    corpus.header.n_scenes = args.scenes;

    write_output(&args.out.join(VOCAB_FILE), vocab.to_json().as_bytes())?;
    write_output(&args.out.join(CORPUS_FILE), &corpus_bytes(&corpus, &vocab)?)?;
    if args.holdout > 0 {
        let held = Corpus {
            header: CorpusHeader {
                n_scenes: args.holdout,
                ..corpus.header.clone()
            },
            entries: held_entries,
        };
        write_output(&args.out.join(HELDOUT_FILE), &corpus_bytes(&held, &vocab)?)?;
    }
    println!(
        "wrote {} training and {} held-out scenes to {} (vocabulary {})",
        args.scenes,
        args.holdout,
        args.out.display(),
        &vocab.hash()[..12]
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    loss: f64,
}

pub fn pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.pretrain.epochs = e;
    }
    let workers = Workers::new(args.workers)?;
    let data = DataDir::load(&args.data)?;
    ensure_out_dir(&args.out)?;

    let reflm = data.reference_lm(None, &cfg)?;
    let mut policy = PolicyNet::new(&cfg.model, &data.vocab)?;
    let losses = mle_pretrain(&mut policy, &data.train.entries, &cfg.pretrain, &workers)?;

    let mut log = JsonlWriter::open(&args.out.join(METRICS_FILE), false)?;
    for (epoch, &loss) in losses.iter().enumerate() {
        log.write(&EpochRecord { epoch, loss })?;
    }
    let ckpt = Checkpoint::pretrain(policy, cfg.hash(), cfg.pretrain.seed);
    ckpt.save(&args.out.join(CHECKPOINT_FILE))?;
    write_output(&args.out.join(REFLM_FILE), reflm.to_text().as_bytes())?;
    write_output(&args.out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    match losses.last() {
        Some(l) => println!("pretrained {} epochs, final loss {l:.4}", losses.len()),
        None => println!("zero epochs: checkpoint holds the initialization"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::from_json(&read_input(path, "checkpoint")?)?)
}

pub fn rl_train(args: RlTrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(f) = args.flavor {
        cfg.trainer.flavor = f;
    }
    cfg.trainer.validate()?;
    let workers = Workers::new(args.workers)?;
    let data = DataDir::load(&args.data)?;
    let setup = RewardSetup {
        reflm: data.reference_lm(args.reflm.as_deref(), &cfg)?,
        vocab: data.vocab.clone(),
        oracle: cfg.scorers.sim,
        bad_phrases: bad_phrases(args.bad_phrases.as_ref())?,
    };
    let (ckpt, resuming) = match (&args.resume, &args.init) {
        (Some(p), _) => {
            let c = load_checkpoint(p)?;
            if c.kind != CheckpointKind::Rl {
                return Err(CliError::Usage(format!("{} is not an RL checkpoint", p.display())));
            }
            (c, true)
        }
        (None, Some(p)) => (load_checkpoint(p)?, false),
        (None, None) => return Err(CliError::Usage("pass --init or --resume".into())),
    };
    if ckpt.policy.vocab_size != data.vocab.len() {
        return Err(CliError::Usage("checkpoint vocabulary does not match the data directory".into()));
    }
    let mut trainer = RlTrainer::from_checkpoint(cfg.trainer.clone(), ckpt, workers)?;
    ensure_out_dir(&args.out)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let mut log = JsonlWriter::open(&args.out.join(METRICS_FILE), resuming)?;
    let scenes: Vec<Scene> = data.train.entries.iter().map(|e| e.0.clone()).collect();
    let save_every = args.save_every.unwrap_or(0);
    let metrics = train_loop(&mut trainer, &scenes, &setup, args.steps, |m, t| {
        log.write(m).map_err(|e| vlrm_core::Error::Io(std::io::Error::other(e.to_string())))?;
        if save_every > 0 && t.step % save_every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    write_output(&args.out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    match metrics.last() {
        Some(m) => println!(
            "{} step {}: mean sim {:.3}, mean ref {:.3}, mean return {:.3}",
            cfg.trainer.flavor,
            trainer.step,
            m.mean_sim,
            m.mean_ref,
            m.mean_return
        ),
        None => println!("already at step {}", trainer.step),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    format: &'static str,
    version: u32,
    split: &'static str,
    decode: DecodeConfig,
    retrieval: RetrievalReport,
    stats: CaptionStats,
    mean_sim: f64,
    mean_ref: f64,
}

#[derive(Serialize)]
struct CaptionRecord<'a> {
    scene: u64,
    caption: &'a str,
    has_eos: bool,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = DataDir::load(&args.data)?;
    let (split, corpus) = match (args.split, &data.heldout) {
        (Some(Split::Train), _) | (None, None) => ("train", &data.train),
        (Some(Split::Heldout) | None, Some(h)) => ("heldout", h),
        (Some(Split::Heldout), None) => {
            return Err(CliError::Usage(format!("{} has no {HELDOUT_FILE}", args.data.display())))
        }
    };
    let mut decode_cfg = cfg.eval.decode.clone();
    if let DecodeChoice::Greedy = args.decode {
        decode_cfg = DecodeConfig {
            num_beams: 1,
            no_repeat_ngram_size: 0,
            ..decode_cfg
        };
    }
    let bps = bad_phrases(args.bad_phrases.as_ref())?;
    let reflm = data.reference_lm(args.reflm.as_deref(), &cfg)?;
    let policy = ckpt.policy;
    if policy.vocab_size != data.vocab.len() {
        return Err(CliError::Usage("checkpoint vocabulary does not match the data directory".into()));
    }
    let scenes: Vec<Scene> = corpus.entries.iter().map(|e| e.0.clone()).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(decode_cfg.seed);
    let captions: Vec<TokenSeq> = scenes
        .iter()
        .map(|s| decode(&policy, &s.embedding, &decode_cfg, &mut rng))
        .collect::<Result<_, _>>()?;
    let retrieval = retrieval_eval(&captions, &scenes, &cfg.eval.ks, &data.vocab)?;
    let n = scenes.len() as f64;
    let report = EvalReport {
        format: "vlrm-eval",
        version: 1,
        split,
        stats: caption_stats(&captions, &data.vocab, &bps)?,
        mean_sim: scenes
            .iter()
            .zip(&captions)
            .map(|(s, c)| sim_score(s, c, &cfg.scorers.sim, &data.vocab))
            .sum::<f64>()
            / n,
        mean_ref: captions.iter().map(|c| ref_score(c, &reflm)).sum::<f64>() / n,
        decode: decode_cfg,
        retrieval,
    };

    ensure_out_dir(&args.out)?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    json.push(b'\n');
    write_output(&args.out.join("report.json"), &json)?;
    let mut dump = JsonlWriter::open(&args.out.join("captions.jsonl"), false)?;
    for (scene, cap) in scenes.iter().zip(&captions) {
        let text = data.vocab.detokenize(cap)?;
        dump.write(&CaptionRecord {
            scene: scene.id,
            caption: &text,
            has_eos: cap.has_eos(),
        })?;
    }
    let r = &report.retrieval;
    let recalls: Vec<String> = r.recall_at.iter().map(|(k, v)| format!("R@{k} {v:.3}")).collect();
    println!("{split}: {} queries, MRR {:.3}, {}", r.n_queries, r.mrr, recalls.join(", "));
    Ok(())
}

#[derive(Serialize)]
struct TokenRow<'a> {
    token: &'a str,
    bad: u8,
    repeat: u8,
    ret: f64,
}

#[derive(Serialize)]
struct ScoreReport<'a> {
    scene: u64,
    caption: String,
    sim: f64,
    reference: f64,
    noeos: u8,
    bad_spans: Vec<String>,
    tokens: Vec<TokenRow<'a>>,
}

pub fn score(args: ScoreArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let data = DataDir::load(&args.data)?;
    let scene = data
        .train
        .entries
        .iter()
        .chain(data.heldout.iter().flat_map(|h| h.entries.iter()))
        .map(|e| &e.0)
        .find(|s| s.id == args.scene)
        .ok_or_else(|| CliError::Usage(format!("no scene with id {}", args.scene)))?;
    let vocab = &data.vocab;
    let caption = if args.raw {
        vocab.tokenize_raw(&args.caption)?
    } else {
        vocab.tokenize(&args.caption)?
    };
    let bps = bad_phrases(args.bad_phrases.as_ref())?;
    let reflm = data.reference_lm(args.reflm.as_deref(), &cfg)?;
    let sim = cfg.trainer.sim_variant.apply(sim_score(scene, &caption, &cfg.scorers.sim, vocab));
    let reference = ref_score(&caption, &reflm);
    let flags = PenaltyFlags::detect(&caption, &bps, vocab)?;
    let returns = compute_returns(&caption, sim, reference, &flags, cfg.trainer.gamma)?;
    let words = vocab.words(&caption)?;
    let content: Vec<&str> = words.iter().copied().filter(|w| *w != vlrm_core::textcore::EOS).collect();
    let bad_spans = bps
        .spans(&content)
        .into_iter()
        .map(|m| format!("{:?} [{}, {})", content[m.start..m.end].join(" "), m.start, m.end))
        .collect();
    let report = ScoreReport {
        scene: scene.id,
        caption: words.join(" "),
        sim,
        reference,
        noeos: flags.noeos,
        bad_spans,
        tokens: words
            .iter()
            .enumerate()
            .map(|(k, w)| TokenRow {
                token: w,
                bad: flags.bad[k],
                repeat: flags.repeat[k],
                ret: returns.returns[k],
            })
            .collect(),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
        return Ok(());
    }
    println!("scene    {}", report.scene);
    println!("caption  {}", report.caption);
    println!("sim      {:.6}", report.sim);
    println!("ref      {:.6}", report.reference);
    println!("noeos    {}", report.noeos);
    if report.bad_spans.is_empty() {
        println!("bad      none");
    } else {
        println!("bad      {}", report.bad_spans.join(", "));
    }
    println!();
    println!("{:>3}  {:<12} {:>3} {:>6} {:>12}", "k", "token", "bad", "repeat", "return");
    for (k, row) in report.tokens.iter().enumerate() {
        println!("{:>3}  {:<12} {:>3} {:>6} {:>12.6}", k + 1, row.token, row.bad, row.repeat, row.ret);
    }
    Ok(())
}

