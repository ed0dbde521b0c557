use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{CorpusConfig, TokenSeq};
use crate::error::{config_err, Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Role of a word inside scene descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrClass {
    Object,
    Color,
    Place,
}

/// One coordinate of the embedding basis: an attribute word and its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisWord {
    pub id: TokenId,
    pub class: AttrClass,
    pub weight: f64,
}

/// Word-level vocabulary with the word classes the reward needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub colors: BTreeSet<TokenId>,
    pub prepositions: BTreeSet<TokenId>,
    pub articles: BTreeSet<TokenId>,
    /// Attribute words in id order; position in this list is the embedding axis.
    pub basis: Vec<BasisWord>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds the vocabulary from a corpus configuration.
    ///
    /// Specials come first (`<pad>`, `<bos>`, `<eos>`), followed by articles,
    /// prepositions, colors, objects, places and filler words in config order.
    pub fn build(config: &CorpusConfig) -> Result<Self> {
        let classes: [(&str, &[String]); 6] = [
            ("articles", &config.articles),
            ("prepositions", &config.prepositions),
            ("colors", &config.colors),
            ("objects", &config.objects),
            ("places", &config.places),
            ("filler", &config.filler),
        ];
        if classes.iter().all(|(_, words)| words.is_empty()) {
            return Err(config_err("lexicon is empty"));
        }
        if config.objects.is_empty() || config.places.is_empty() {
            return Err(config_err("objects and places must be non-empty"));
        }

        let mut tokens: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into()];
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let mut class_ids: Vec<BTreeSet<TokenId>> = Vec::new();
        for (name, words) in classes {
            let mut ids = BTreeSet::new();
            for word in words {
                if word.is_empty() || word.chars().any(char::is_whitespace) {
                    return Err(config_err(format!("invalid token {word:?} in {name}")));
                }
                if index.contains_key(word) {
                    return Err(config_err(format!("duplicate token {word:?}")));
                }
                let id = tokens.len() as TokenId;
                tokens.push(word.clone());
                index.insert(word.clone(), id);
                ids.insert(id);
            }
            class_ids.push(ids);
        }

        let mut basis = Vec::new();
        for (set, class, weight) in [
            (&class_ids[2], AttrClass::Color, config.color_weight),
            (&class_ids[3], AttrClass::Object, config.object_weight),
            (&class_ids[4], AttrClass::Place, config.place_weight),
        ] {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(config_err(format!("{class:?} weight must be positive")));
            }
            basis.extend(set.iter().map(|&id| BasisWord { id, class, weight }));
        }

        Ok(Vocab {
            tokens,
            pad: 0,
            bos: 1,
            eos: 2,
            prepositions: class_ids[1].clone(),
            articles: class_ids[0].clone(),
            colors: class_ids[2].clone(),
            basis,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Decode(format!("token id {id} out of range")))
    }

    /// Words exempt from the repetition penalty.
    pub fn is_repeat_exempt(&self, id: TokenId) -> bool {
        self.colors.contains(&id) || self.prepositions.contains(&id) || self.articles.contains(&id)
    }

    /// Embedding axis of an attribute word, if it is one.
    pub fn basis_index(&self, id: TokenId) -> Option<usize> {
        self.basis.binary_search_by_key(&id, |b| b.id).ok()
    }

    pub fn embedding_dim(&self) -> usize {
        self.basis.len()
    }

    /// Tokens a language model can emit: everything except `<pad>` and `<bos>`.
    pub fn emittable(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as TokenId).filter(move |&id| id != self.pad && id != self.bos)
    }

    /// Splits on whitespace and appends `<eos>`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = self.lookup_words(text)?;
        if ids.last() != Some(&self.eos) {
            ids.push(self.eos);
        }
        TokenSeq::new(ids, self)
    }

    /// Splits on whitespace without appending `<eos>`; a literal trailing
    /// `<eos>` is kept.
    pub fn tokenize_raw(&self, text: &str) -> Result<TokenSeq> {
        TokenSeq::new(self.lookup_words(text)?, self)
    }

    fn lookup_words(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Decode(format!("unknown word {w:?}"))))
            .collect()
    }

    /// Space-joined words with `<eos>` stripped.
    pub fn detokenize(&self, seq: &TokenSeq) -> Result<String> {
        let words = self.words(seq)?;
        Ok(words
            .into_iter()
            .filter(|w| *w != EOS)
            .collect::<Vec<_>>()
            .join(" "))
    }

    /// Surface strings of every token in the sequence, `<eos>` included.
    pub fn words<'a>(&'a self, seq: &TokenSeq) -> Result<Vec<&'a str>> {
        seq.ids().iter().map(|&id| self.word(id)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut vocab: Vocab = serde_json::from_str(text)?;
        vocab.index = vocab
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format("duplicate tokens in vocab file".into()));
        }
        Ok(vocab)
    }

    pub fn hash(&self) -> String {
        crate::hashing::content_hash(self)
    }
}
