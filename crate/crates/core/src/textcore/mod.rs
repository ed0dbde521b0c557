//! Vocabulary, tokenization, and the synthetic scene corpus that stands in
//! for images and their reference captions.

mod corpus;
mod vocab;

use serde::{Deserialize, Serialize};

pub(crate) use corpus::bag_embedding;
pub use corpus::{
    generate_corpus, generate_scene, read_corpus, write_corpus, Attribute, Corpus, CorpusHeader,
    Scene, Slot,
};
pub use vocab::{AttrClass, BasisWord, TokenId, Vocab, BOS, EOS, PAD};

use crate::error::{contract, Error, Result};

/// Knobs for the vocabulary and the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub articles: Vec<String>,
    pub prepositions: Vec<String>,
    pub colors: Vec<String>,
    pub objects: Vec<String>,
    pub places: Vec<String>,
    pub filler: Vec<String>,
    pub object_weight: f64,
    pub color_weight: f64,
    pub place_weight: f64,
    /// Probability that a scene holds a second object.
    pub two_object_prob: f64,
    /// Probabilities that the reference caption mentions each optional attribute.
    pub keep_color_prob: f64,
    pub keep_second_object_prob: f64,
    pub keep_place_prob: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|w| w.to_string()).collect()
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            articles: words(&["a", "an", "the"]),
            prepositions: words(&["in", "on", "near", "under", "behind", "beside", "with", "at"]),
            colors: words(&[
                "red", "blue", "green", "yellow", "black", "white", "orange", "purple",
            ]),
            objects: words(&[
                "man", "woman", "dog", "cat", "car", "bike", "ball", "kite", "boat", "horse",
                "bird", "umbrella",
            ]),
            places: words(&["park", "street", "kitchen", "garden", "field", "yard"]),
            filler: words(&[
                "and", "is", "of", "image", "video", "photo", "camera", "shot", "talking", "about",
                "shirt", "sitting", "standing", "1993", "2010",
            ]),
            object_weight: 1.0,
            color_weight: 0.8,
            place_weight: 0.6,
            two_object_prob: 0.7,
            keep_color_prob: 0.25,
            keep_second_object_prob: 0.7,
            keep_place_prob: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn hash(&self) -> String {
        crate::hashing::content_hash(self)
    }
}

/// A caption as token ids.
///
/// If `has_eos` is set the last id is `<eos>` and it appears nowhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    has_eos: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<f64>>,
}

impl TokenSeq {
    /// Validates ids against `vocab`; `has_eos` is inferred from the last id.
    pub fn new(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        if ids.is_empty() {
            return Err(contract("token sequence must be non-empty"));
        }
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= vocab.len() {
                return Err(Error::Decode(format!("token id {id} out of range")));
            }
            if id == vocab.pad || id == vocab.bos {
                return Err(contract(format!("special token at position {pos}")));
            }
            if id == vocab.eos && pos + 1 != ids.len() {
                return Err(contract(format!("interior <eos> at position {pos}")));
            }
        }
        let has_eos = ids.last() == Some(&vocab.eos);
        Ok(TokenSeq {
            ids,
            has_eos,
            logprobs: None,
        })
    }

    /// Builds a sequence without checking ids against a vocabulary.
    pub fn from_ids_unchecked(ids: Vec<TokenId>, has_eos: bool) -> Self {
        TokenSeq {
            ids,
            has_eos,
            logprobs: None,
        }
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        debug_assert_eq!(logprobs.len(), self.ids.len());
        self.logprobs = Some(logprobs);
        self
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_eos(&self) -> bool {
        self.has_eos
    }

    pub fn logprobs(&self) -> Option<&[f64]> {
        self.logprobs.as_deref()
    }

    /// Ids without a trailing `<eos>`.
    pub fn content(&self) -> &[TokenId] {
        if self.has_eos {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::build(&CorpusConfig::default()).unwrap()
    }

    #[test]
    fn eos_invariants() {
        let v = vocab();
        let seq = v.tokenize("a man").unwrap();
        assert!(seq.has_eos());
        assert_eq!(*seq.ids().last().unwrap(), v.eos);
        let interior = vec![v.id("a").unwrap(), v.eos, v.id("man").unwrap()];
        assert!(TokenSeq::new(interior, &v).is_err());
        assert!(TokenSeq::new(vec![], &v).is_err());
        assert!(TokenSeq::new(vec![v.pad, v.eos], &v).is_err());
    }

    #[test]
    fn detokenize_rejects_foreign_ids() {
        let v = vocab();
        let seq = TokenSeq::from_ids_unchecked(vec![v.len() as TokenId + 3], false);
        assert!(matches!(v.detokenize(&seq), Err(Error::Decode(_))));
    }

    #[test]
    fn round_trip_sweep() {
        use rand::{Rng, SeedableRng};
        let v = vocab();
        let words: Vec<TokenId> = v.emittable().filter(|&id| id != v.eos).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let n = rng.gen_range(0..12);
            let mut ids: Vec<TokenId> = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
            ids.push(v.eos);
            let seq = TokenSeq::new(ids, &v).unwrap();
            let text = v.detokenize(&seq).unwrap();
            assert_eq!(v.tokenize(&text).unwrap(), seq);
        }
    }

    proptest! {
        #[test]
        fn raw_round_trip(ids in proptest::collection::vec(3u32..40, 1..15)) {
            let v = vocab();
            let seq = TokenSeq::new(ids, &v).unwrap();
            let text = v.detokenize(&seq).unwrap();
            prop_assert_eq!(v.tokenize_raw(&text).unwrap(), seq);
        }
    }
}
