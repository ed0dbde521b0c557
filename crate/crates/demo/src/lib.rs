//! WebAssembly bindings for `www/index.html`.
//!
//! Each exported function takes plain strings and numbers and returns a
//! JSON document; the `*_json` functions hold the logic so it can be tested
//! natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vlrm_core::eval::embed_caption;
use vlrm_core::model::topk_distribution;
use vlrm_core::rewardshape::{compute_returns, BadPhraseSet, PenaltyFlags};
use vlrm_core::scorers::{dual_softmax_diagonal, rs_reward, sim_score, SimOracle, RS_EPS, RS_WEIGHT};
use vlrm_core::textcore::{generate_scene, CorpusConfig, Vocab};

fn vocab() -> Vocab {
    Vocab::build(&CorpusConfig::default()).expect("default lexicon is valid")
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

#[derive(Serialize)]
struct TokenReturn {
    token: String,
    bad: u8,
    repeat: u8,
    ret: f64,
}

#[derive(Serialize)]
struct Breakdown {
    tokens: Vec<TokenReturn>,
    noeos: u8,
    terminal: f64,
}

/// Per-token penalty flags and returns for `caption`.
///
/// `phrases` holds one bad phrase per line; an empty string selects the
/// shipped list. Unknown words are allowed: the demo vocabulary is only
/// used to recognize colors, prepositions and articles.
pub fn return_breakdown_json(caption: &str, phrases: &str, sim: f64, reference: f64, raw: bool) -> Result<String, String> {
    let bps = if phrases.trim().is_empty() {
        BadPhraseSet::default()
    } else {
        BadPhraseSet::parse(phrases)
    };
    let base = vocab();
    let words: Vec<String> = caption.split_whitespace().map(String::from).collect();
    if words.is_empty() {
        return Err("caption is empty".into());
    }
    // extend the lexicon with unseen words so any caption can be scored
    let mut cfg = CorpusConfig::default();
    for w in &words {
        if base.id(w).is_none() && !cfg.filler.contains(w) {
            cfg.filler.push(w.clone());
        }
    }
    let v = Vocab::build(&cfg).map_err(|e| e.to_string())?;
    let text = words.join(" ");
    let seq = if raw { v.tokenize_raw(&text) } else { v.tokenize(&text) }.map_err(|e| e.to_string())?;
    let flags = PenaltyFlags::detect(&seq, &bps, &v).map_err(|e| e.to_string())?;
    let returns = compute_returns(&seq, sim, reference, &flags, 1.0).map_err(|e| e.to_string())?;
    let names = v.words(&seq).map_err(|e| e.to_string())?;
    Ok(to_json(&Breakdown {
        tokens: names
            .iter()
            .enumerate()
            .map(|(k, w)| TokenReturn {
                token: w.to_string(),
                bad: flags.bad[k],
                repeat: flags.repeat[k],
                ret: returns.returns[k],
            })
            .collect(),
        noeos: flags.noeos,
        terminal: sim + reference - f64::from(flags.noeos),
    }))
}

#[derive(Serialize)]
struct SceneCard {
    id: u64,
    attributes: Vec<String>,
}

#[derive(Serialize)]
struct RsBatch {
    scenes: Vec<SceneCard>,
    /// `similarity[i][j]`: scene `i` against caption `j`.
    similarity: Vec<Vec<f64>>,
    matching: Vec<f64>,
    diagonal: Vec<f64>,
    rewards: Vec<f64>,
}

/// Scenes `0..captions.len()` drawn with `seed`, scored against one caption
/// each (newline-separated): matching score, dual-softmax diagonal, and the
/// batch-standardized retrieval reward.
pub fn rs_batch_json(seed: u64, captions: &str, weight: f64) -> Result<String, String> {
    let v = vocab();
    let cfg = CorpusConfig::default();
    let lines: Vec<&str> = captions.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() < 2 {
        return Err("enter at least two captions, one per line".into());
    }
    let seqs = lines
        .iter()
        .map(|l| v.tokenize(l).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let scenes: Vec<_> = (0..lines.len() as u64).map(|id| generate_scene(seed, id, &v, &cfg)).collect();
    let images: Vec<Vec<f64>> = scenes.iter().map(|s| s.embedding.clone()).collect();
    let texts: Vec<Vec<f64>> = seqs.iter().map(|c| embed_caption(c, &v)).collect();
    let oracle = SimOracle::default();
    let matching: Vec<f64> = scenes.iter().zip(&seqs).map(|(s, c)| sim_score(s, c, &oracle, &v)).collect();
    let rewards = rs_reward(&images, &texts, &matching, weight, RS_EPS).map_err(|e| e.to_string())?;
    let similarity = images
        .iter()
        .map(|i| texts.iter().map(|t| i.iter().zip(t).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(to_json(&RsBatch {
        scenes: scenes
            .iter()
            .map(|s| SceneCard {
                id: s.id,
                attributes: s.attributes.iter().map(|a| v.word(a.value).map_or_else(|_| "?".to_string(), str::to_string)).collect(),
            })
            .collect(),
        similarity,
        matching,
        diagonal: dual_softmax_diagonal(&images, &texts),
        rewards,
    }))
}

#[derive(Serialize)]
struct Choice {
    index: usize,
    probability: f64,
}

/// The tempered top-k distribution over comma- or space-separated logits.
pub fn topk_json(logits: &str, top_k: usize, temperature: f64) -> Result<String, String> {
    let values = logits
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err("no logits given".into());
    }
    if top_k == 0 || !(temperature > 0.0) {
        return Err("top_k must be at least 1 and temperature positive".into());
    }
    let dist = topk_distribution(&values, top_k, temperature);
    Ok(to_json(
        &dist
            .into_iter()
            .map(|(index, probability)| Choice { index, probability })
            .collect::<Vec<_>>(),
    ))
}

#[wasm_bindgen]
pub fn return_breakdown(caption: &str, phrases: &str, sim: f64, reference: f64, raw: bool) -> Result<String, JsValue> {
    return_breakdown_json(caption, phrases, sim, reference, raw).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rs_batch(seed: u32, captions: &str, weight: f64) -> Result<String, JsValue> {
    rs_batch_json(u64::from(seed), captions, weight).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn topk(logits: &str, top_k: usize, temperature: f64) -> Result<String, JsValue> {
    topk_json(logits, top_k, temperature).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn default_rs_weight() -> f64 {
    RS_WEIGHT
}
