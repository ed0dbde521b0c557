use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttrClass, CorpusConfig, TokenId, TokenSeq, Vocab};
use crate::error::{contract, Error, Result};
use crate::hashing::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Object1,
    Color1,
    Object2,
    Color2,
    Place,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub slot: Slot,
    pub value: TokenId,
}

/// Synthetic stand-in for an image: typed attributes plus a unit embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub attributes: Vec<Attribute>,
    pub embedding: Vec<f64>,
}

impl Scene {
    pub fn value_set(&self) -> std::collections::BTreeSet<TokenId> {
        self.attributes.iter().map(|a| a.value).collect()
    }

    pub fn value(&self, slot: Slot) -> Option<TokenId> {
        self.attributes.iter().find(|a| a.slot == slot).map(|a| a.value)
    }
}

/// Normalized weighted bag of attribute words in the vocabulary basis.
///
/// Returns `None` when no attribute word is present.
pub(crate) fn bag_embedding(vocab: &Vocab, ids: impl IntoIterator<Item = TokenId>) -> Option<Vec<f64>> {
    let mut v = vec![0.0; vocab.embedding_dim()];
    for id in ids {
        if let Some(axis) = vocab.basis_index(id) {
            v[axis] += vocab.basis[axis].weight;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn class_ids(vocab: &Vocab, class: AttrClass) -> Vec<TokenId> {
    vocab.basis.iter().filter(|b| b.class == class).map(|b| b.id).collect()
}

/// Scene `id` under `seed`; a pure function of its arguments.
pub fn generate_scene(seed: u64, id: u64, vocab: &Vocab, config: &CorpusConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, id, 0x5CE7E]));
    let objects = class_ids(vocab, AttrClass::Object);
    let colors = class_ids(vocab, AttrClass::Color);
    let places = class_ids(vocab, AttrClass::Place);

    let n_objects = if objects.len() >= 2 && rng.gen_bool(config.two_object_prob) { 2 } else { 1 };
    let picked_objects: Vec<TokenId> = objects.choose_multiple(&mut rng, n_objects).copied().collect();
    let picked_colors: Vec<TokenId> = colors
        .choose_multiple(&mut rng, n_objects.min(colors.len()))
        .copied()
        .collect();

    let mut attributes = Vec::with_capacity(5);
    let slots = [(Slot::Object1, Slot::Color1), (Slot::Object2, Slot::Color2)];
    for (i, &object) in picked_objects.iter().enumerate() {
        attributes.push(Attribute { slot: slots[i].0, value: object });
        if let Some(&color) = picked_colors.get(i) {
            attributes.push(Attribute { slot: slots[i].1, value: color });
        }
    }
    attributes.push(Attribute {
        slot: Slot::Place,
        value: *places.choose(&mut rng).expect("places non-empty"),
    });

    let embedding = bag_embedding(vocab, attributes.iter().map(|a| a.value)).expect("scene has attributes");
    Scene { id, attributes, embedding }
}

fn article_for(vocab: &Vocab, next: TokenId) -> TokenId {
    let starts_with_vowel = vocab
        .word(next)
        .map(|w| w.starts_with(['a', 'e', 'i', 'o', 'u']))
        .unwrap_or(false);
    let a = vocab.id("a");
    let an = vocab.id("an");
    match (starts_with_vowel, a, an) {
        (true, _, Some(an)) => an,
        (_, Some(a), _) => a,
        _ => *vocab.articles.iter().next().unwrap_or(&next),
    }
}

/// Template caption mentioning a strict subset of the scene's attributes.
fn reference_caption(scene: &Scene, vocab: &Vocab, config: &CorpusConfig, rng: &mut ChaCha8Rng) -> TokenSeq {
    let optional: Vec<Slot> = scene
        .attributes
        .iter()
        .map(|a| a.slot)
        .filter(|&s| s != Slot::Object1)
        .collect();
    let keep = loop {
        let keep: Vec<Slot> = optional
            .iter()
            .copied()
            .filter(|&slot| {
                let p = match slot {
                    Slot::Color1 | Slot::Color2 => config.keep_color_prob,
                    Slot::Object2 => config.keep_second_object_prob,
                    Slot::Place => config.keep_place_prob,
                    Slot::Object1 => 1.0,
                };
                rng.gen_bool(p)
            })
            .collect();
        // A colour without its object is not mentioned.
        let effective = keep
            .iter()
            .filter(|&&s| s != Slot::Color2 || keep.contains(&Slot::Object2))
            .count();
        if effective < optional.len() {
            break keep;
        }
    };
    let kept = |slot: Slot| keep.contains(&slot);

    let relations: Vec<TokenId> = vocab.prepositions.iter().copied().collect();
    let mut ids = Vec::new();
    let noun_phrase = |ids: &mut Vec<TokenId>, color: Option<TokenId>, object: TokenId| {
        let head = color.unwrap_or(object);
        ids.push(article_for(vocab, head));
        ids.extend(color);
        ids.push(object);
    };
    let object1 = scene.value(Slot::Object1).expect("scene has a first object");
    noun_phrase(&mut ids, scene.value(Slot::Color1).filter(|_| kept(Slot::Color1)), object1);
    if let Some(object2) = scene.value(Slot::Object2).filter(|_| kept(Slot::Object2)) {
        if let Some(&rel) = relations.choose(rng) {
            ids.push(rel);
        }
        noun_phrase(&mut ids, scene.value(Slot::Color2).filter(|_| kept(Slot::Color2)), object2);
    }
    if let Some(place) = scene.value(Slot::Place).filter(|_| kept(Slot::Place)) {
        ids.extend(vocab.id("in"));
        ids.extend(vocab.id("the"));
        ids.push(place);
    }
    ids.push(vocab.eos);
    TokenSeq::from_ids_unchecked(ids, true)
}

/// One scene with its reference caption per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub entries: Vec<(Scene, TokenSeq)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub config_hash: String,
    pub vocab_hash: String,
}

/// Generates `n_scenes` scenes with ids `0..n_scenes`, reproducible from `seed`.
pub fn generate_corpus(seed: u64, n_scenes: usize, vocab: &Vocab, config: &CorpusConfig) -> Result<Corpus> {
    if n_scenes == 0 {
        return Err(contract("n_scenes must be at least 1"));
    }
    let entries = (0..n_scenes as u64)
        .map(|id| {
            let scene = generate_scene(seed, id, vocab, config);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, id, 0x4EF]));
            let reference = reference_caption(&scene, vocab, config, &mut rng);
            (scene, reference)
        })
        .collect();
    Ok(Corpus {
        header: CorpusHeader {
            format: "vlrm-corpus".into(),
            version: 1,
            seed,
            n_scenes,
            config_hash: config.hash(),
            vocab_hash: vocab.hash(),
        },
        entries,
    })
}

#[derive(Serialize, Deserialize)]
struct AttributeRecord {
    slot: Slot,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    attributes: Vec<AttributeRecord>,
    embedding: Vec<f64>,
    reference: String,
}

/// Line-delimited JSON: a header line, then one scene + reference per line.
pub fn write_corpus<W: Write>(mut out: W, corpus: &Corpus, vocab: &Vocab) -> Result<()> {
    serde_json::to_writer(&mut out, &corpus.header)?;
    out.write_all(b"\n")?;
    for (scene, reference) in &corpus.entries {
        let record = SceneRecord {
            id: scene.id,
            attributes: scene
                .attributes
                .iter()
                .map(|a| {
                    Ok(AttributeRecord {
                        slot: a.slot,
                        value: vocab.word(a.value)?.to_string(),
                    })
                })
                .collect::<Result<_>>()?,
            embedding: scene.embedding.clone(),
            reference: vocab.detokenize(reference)?,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R, vocab: &Vocab) -> Result<Corpus> {
    let mut lines = input.lines();
    let header: CorpusHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("empty corpus file".into())),
    };
    if header.format != "vlrm-corpus" || header.version != 1 {
        return Err(Error::Format(format!("unsupported corpus format {} v{}", header.format, header.version)));
    }
    if header.vocab_hash != vocab.hash() {
        return Err(Error::HashMismatch {
            expected: vocab.hash(),
            found: header.vocab_hash,
        });
    }
    let mut entries = Vec::with_capacity(header.n_scenes);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line)?;
        let attributes = record
            .attributes
            .into_iter()
            .map(|a| {
                let value = vocab
                    .id(&a.value)
                    .ok_or_else(|| Error::Decode(format!("unknown attribute value {:?}", a.value)))?;
                Ok(Attribute { slot: a.slot, value })
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = Scene {
            id: record.id,
            attributes,
            embedding: record.embedding,
        };
        entries.push((scene, vocab.tokenize(&record.reference)?));
    }
    if entries.len() != header.n_scenes {
        return Err(Error::Format(format!(
            "header declares {} scenes, found {}",
            header.n_scenes,
            entries.len()
        )));
    }
    Ok(Corpus { header, entries })
}
