//! Text-to-image retrieval over generated captions and caption statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rewardshape::{detect_bad, detect_repeat, BadPhraseSet};
use crate::textcore::{bag_embedding, Scene, TokenSeq, Vocab};

/// Unit vector of the caption's attribute words in the scene embedding basis.
///
/// A caption without attribute words maps to the uniform unit vector.
pub fn embed_caption(caption: &TokenSeq, vocab: &Vocab) -> Vec<f64> {
    bag_embedding(vocab, caption.ids().iter().copied()).unwrap_or_else(|| {
        let d = vocab.embedding_dim();
        vec![1.0 / (d as f64).sqrt(); d]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mrr: f64,
    /// Keys are K; values are the fraction of queries ranked within the top K.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// 1-based rank of each query's own scene.
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(0.0)
    }

    pub fn from_ranks(ranks: Vec<usize>, ks: &[usize]) -> Self {
        let n = ranks.len();
        let denom = n.max(1) as f64;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / denom;
        let recall_at = ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / denom))
            .collect();
        RetrievalReport {
            mrr,
            recall_at,
            n_queries: n,
            ranks,
        }
    }
}

/// Ranks each query's own item (same position) among all items by cosine
/// similarity, descending; equal similarities are broken by ascending item id.
pub fn rank_queries(queries: &[Vec<f64>], items: &[Vec<f64>], item_ids: &[u64]) -> Result<Vec<usize>> {
    if queries.len() != items.len() || items.len() != item_ids.len() {
        return Err(contract(format!(
            "{} queries for {} items ({} ids)",
            queries.len(),
            items.len(),
            item_ids.len()
        )));
    }
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    Ok(queries
        .iter()
        .enumerate()
        .map(|(q, query)| {
            let own = cos(query, &items[q]);
            let own_id = item_ids[q];
            1 + items
                .iter()
                .zip(item_ids)
                .enumerate()
                .filter(|&(j, (item, &id))| {
                    if j == q {
                        return false;
                    }
                    let s = cos(query, item);
                    s > own || (s == own && id < own_id)
                })
                .count()
        })
        .collect())
}

/// Caption `i` queries for scene `i` among all scenes.
pub fn retrieval_eval(captions: &[TokenSeq], scenes: &[Scene], ks: &[usize], vocab: &Vocab) -> Result<RetrievalReport> {
    if captions.len() != scenes.len() {
        return Err(contract(format!("{} captions for {} scenes", captions.len(), scenes.len())));
    }
    if let Some(&kmax) = ks.iter().max() {
        if scenes.len() < kmax {
            return Err(contract(format!("need at least {kmax} scenes, got {}", scenes.len())));
        }
    }
    let queries: Vec<Vec<f64>> = captions.iter().map(|c| embed_caption(c, vocab)).collect();
    let items: Vec<Vec<f64>> = scenes.iter().map(|s| s.embedding.clone()).collect();
    let ids: Vec<u64> = scenes.iter().map(|s| s.id).collect();
    Ok(RetrievalReport::from_ranks(rank_queries(&queries, &items, &ids)?, ks))
}

/// Descriptive statistics over a set of captions. Lengths exclude `<eos>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub n_captions: usize,
    pub mean_length: f64,
    pub median_length: f64,
    pub mean_colors: f64,
    /// Fraction of captions with at least one bad-phrase token.
    pub bad_phrase_rate: f64,
    /// Fraction of captions with at least one penalized repeat.
    pub repeat_rate: f64,
    pub eos_rate: f64,
}

pub fn caption_stats(captions: &[TokenSeq], vocab: &Vocab, bad_phrases: &BadPhraseSet) -> Result<CaptionStats> {
    if captions.is_empty() {
        return Ok(CaptionStats::default());
    }
    let n = captions.len() as f64;
    let mut lengths: Vec<usize> = captions.iter().map(|c| c.content().len()).collect();
    lengths.sort_unstable();
    let mid = lengths.len() / 2;
    let median = if lengths.len() % 2 == 1 {
        lengths[mid] as f64
    } else {
        (lengths[mid - 1] + lengths[mid]) as f64 / 2.0
    };
    let mut colors = 0usize;
    let mut with_bad = 0usize;
    let mut with_repeat = 0usize;
    for c in captions {
        colors += c.ids().iter().filter(|id| vocab.colors.contains(id)).count();
        if detect_bad(c, bad_phrases, vocab)?.contains(&1) {
            with_bad += 1;
        }
        if detect_repeat(c, vocab).contains(&1) {
            with_repeat += 1;
        }
    }
    Ok(CaptionStats {
        n_captions: captions.len(),
        mean_length: lengths.iter().sum::<usize>() as f64 / n,
        median_length: median,
        mean_colors: colors as f64 / n,
        bad_phrase_rate: with_bad as f64 / n,
        repeat_rate: with_repeat as f64 / n,
        eos_rate: captions.iter().filter(|c| c.has_eos()).count() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcore::{generate_corpus, CorpusConfig, TokenId};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn setup(n: usize) -> (Vocab, Vec<Scene>) {
        let cfg = CorpusConfig::default();
        let vocab = Vocab::build(&cfg).unwrap();
        let corpus = generate_corpus(13, n, &vocab, &cfg).unwrap();
        (vocab, corpus.entries.into_iter().map(|(s, _)| s).collect())
    }

    fn exact_caption(scene: &Scene, vocab: &Vocab) -> TokenSeq {
        let mut ids: Vec<TokenId> = scene.attributes.iter().map(|a| a.value).collect();
        ids.push(vocab.eos);
        TokenSeq::new(ids, vocab).unwrap()
    }

    #[test]
    fn no_attribute_words_falls_back_to_uniform() {
        let (vocab, _) = setup(1);
        let e = embed_caption(&vocab.tokenize("a photo of").unwrap(), &vocab);
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(e.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn exact_caption_has_cosine_one() {
        let (vocab, scenes) = setup(50);
        for scene in &scenes {
            let e = embed_caption(&exact_caption(scene, &vocab), &vocab);
            let cos: f64 = e.iter().zip(&scene.embedding).map(|(a, b)| a * b).sum();
            assert!((cos - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_per_word_accumulation() {
        let (vocab, _) = setup(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let words: Vec<TokenId> = vocab.emittable().filter(|&i| i != vocab.eos).collect();
        for _ in 0..1000 {
            let n = rng.gen_range(1..10);
            let ids: Vec<TokenId> = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
            let cap = TokenSeq::new(ids.clone(), &vocab).unwrap();
            let mut acc = vec![0.0; vocab.embedding_dim()];
            for id in &ids {
                for (axis, b) in vocab.basis.iter().enumerate() {
                    if b.id == *id {
                        acc[axis] += b.weight;
                    }
                }
            }
            let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expected: Vec<f64> = if norm == 0.0 {
                vec![1.0 / (acc.len() as f64).sqrt(); acc.len()]
            } else {
                acc.iter().map(|x| x / norm).collect()
            };
            let got = embed_caption(&cap, &vocab);
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_retrieval_on_disjoint_scenes() {
        let (vocab, scenes) = setup(400);
        let mut picked: Vec<Scene> = Vec::new();
        for s in scenes {
            if picked.iter().all(|p| p.value_set().is_disjoint(&s.value_set())) {
                picked.push(s);
            }
        }
        assert!(picked.len() >= 2);
        let captions: Vec<TokenSeq> = picked.iter().map(|s| exact_caption(s, &vocab)).collect();
        let report = retrieval_eval(&captions, &picked, &[1], &vocab).unwrap();
        assert_eq!(report.recall(1), 1.0);
        assert_eq!(report.mrr, 1.0);
    }

    #[test]
    fn mrr_definition() {
        let r = RetrievalReport::from_ranks(vec![1, 2, 4], &[1, 5, 10]);
        assert!((r.mrr - 0.58333).abs() < 1e-5);
        assert!((r.recall(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.recall(5), 1.0);
    }

    #[test]
    fn length_mismatch() {
        let (vocab, scenes) = setup(3);
        assert!(retrieval_eval(&[], &scenes, &[1], &vocab).is_err());
    }

    fn random_captions(vocab: &Vocab, n: usize, seed: u64) -> Vec<TokenSeq> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let attrs: Vec<TokenId> = vocab.basis.iter().map(|b| b.id).collect();
        (0..n)
            .map(|_| {
                let mut ids: Vec<TokenId> = (0..rng.gen_range(1..4)).map(|_| *attrs.choose(&mut rng).unwrap()).collect();
                ids.push(vocab.eos);
                TokenSeq::new(ids, vocab).unwrap()
            })
            .collect()
    }

    #[test]
    fn matches_exhaustive_rank_oracle() {
        let (vocab, scenes) = setup(50);
        let captions = random_captions(&vocab, 50, 3);
        let report = retrieval_eval(&captions, &scenes, &[1, 5, 10], &vocab).unwrap();
        for (q, cap) in captions.iter().enumerate() {
            let e = embed_caption(cap, &vocab);
            let mut scored: Vec<(f64, u64)> = scenes
                .iter()
                .map(|s| (e.iter().zip(&s.embedding).map(|(a, b)| a * b).sum::<f64>(), s.id))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let rank = scored.iter().position(|&(_, id)| id == scenes[q].id).unwrap() + 1;
            assert_eq!(report.ranks[q], rank);
        }
        let ks = [1usize, 5, 10];
        for w in ks.windows(2) {
            assert!(report.recall(w[0]) <= report.recall(w[1]));
        }
        assert!(report.mrr >= report.recall(1));
    }

    #[test]
    fn permutation_invariance_and_distractors() {
        let (vocab, scenes) = setup(40);
        let captions = random_captions(&vocab, 40, 5);
        let base = retrieval_eval(&captions, &scenes, &[1, 5], &vocab).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let pc: Vec<TokenSeq> = order.iter().map(|&i| captions[i].clone()).collect();
        let ps: Vec<Scene> = order.iter().map(|&i| scenes[i].clone()).collect();
        let permuted = retrieval_eval(&pc, &ps, &[1, 5], &vocab).unwrap();
        assert_eq!(permuted.mrr, base.mrr);
        assert_eq!(permuted.recall_at, base.recall_at);

        // ranks of the first 30 queries never improve when 10 more scenes join
        let small = retrieval_eval(&captions[..30], &scenes[..30], &[1], &vocab).unwrap();
        for q in 0..30 {
            assert!(base.ranks[q] >= small.ranks[q]);
        }
    }

    #[test]
    fn report_serialization_round_trips() {
        let r = RetrievalReport::from_ranks(vec![1, 3, 2, 7], &[1, 5, 10]);
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RetrievalReport>(&text).unwrap(), r);
    }

    #[test]
    fn stats() {
        let (vocab, _) = setup(1);
        let bps = BadPhraseSet::default();
        assert_eq!(caption_stats(&[], &vocab, &bps).unwrap(), CaptionStats::default());
        let one = vocab.tokenize("a red and blue car").unwrap();
        let s = caption_stats(&[one], &vocab, &bps).unwrap();
        assert_eq!(s.mean_colors, 2.0);
        assert_eq!(s.mean_length, 5.0);
    }

    #[test]
    fn stats_fixture() {
        let (vocab, _) = setup(1);
        let bps = BadPhraseSet::default();
        let texts = [
            ("an image of a dog", true),
            ("a red dog in the park", true),
            ("a dog and a dog", true),
            ("a blue cat near a red car", true),
            ("a photo of a man in 1993", true),
            ("a green kite", true),
            ("a man with a umbrella in the yard", true),
            ("a white white horse", false),
            ("a cat", true),
            ("a bird on a boat in the field", false),
        ];
        let caps: Vec<TokenSeq> = texts
            .iter()
            .map(|(t, eos)| if *eos { vocab.tokenize(t).unwrap() } else { vocab.tokenize_raw(t).unwrap() })
            .collect();
        let s = caption_stats(&caps, &vocab, &bps).unwrap();
        // lengths: 5 6 5 7 7 3 8 4 2 8 -> sorted 2 3 4 5 5 6 7 7 8 8
        assert_eq!(s.mean_length, 5.5);
        assert_eq!(s.median_length, 5.5);
        // colors: red, blue+red, green, white+white -> 6
        assert!((s.mean_colors - 0.6).abs() < 1e-12);
        // bad: "an image of", "photo of" + year
        assert!((s.bad_phrase_rate - 0.2).abs() < 1e-12);
        // repeats: second "dog" (articles exempt); "white" is a color
        assert!((s.repeat_rate - 0.1).abs() < 1e-12);
        assert!((s.eos_rate - 0.8).abs() < 1e-12);
    }
}
