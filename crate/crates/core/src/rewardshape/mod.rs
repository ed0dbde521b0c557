//! Token-level penalties and the composite per-token return.
//!
//! For a caption `t_1..t_n` the return of token `k` is
//!
//! ```text
//! R(t_k) = sim + ref - noeos - sum_{s>=k} bad[s] - sum_{s>=k} repeat[s]
//! ```
//!
//! With a discount `gamma < 1` the terminal part `sim + ref - noeos` is
//! discounted from the last token and each penalty from its own position.

mod matcher;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use matcher::{PhraseMatch, PhraseMatcher};

use crate::error::{contract, Result};
use crate::textcore::{TokenSeq, Vocab};

/// The phrase list shipped with the crate.
pub const DEFAULT_BAD_PHRASES: &str = include_str!("../../data/bad_phrases.txt");

/// Phrases whose tokens are penalized, plus the 4-digit year rule.
#[derive(Debug, Clone)]
pub struct BadPhraseSet {
    phrases: Vec<Vec<String>>,
    matcher: PhraseMatcher,
    pub year_rule: bool,
}

impl Default for BadPhraseSet {
    fn default() -> Self {
        Self::parse(DEFAULT_BAD_PHRASES)
    }
}

impl BadPhraseSet {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let phrases: Vec<Vec<String>> = phrases
            .into_iter()
            .map(|p| p.as_ref().split_whitespace().map(String::from).collect::<Vec<_>>())
            .filter(|words| !words.is_empty() && seen.insert(words.clone()))
            .collect();
        let matcher = PhraseMatcher::new(&phrases);
        BadPhraseSet {
            phrases,
            matcher,
            year_rule: true,
        }
    }

    pub fn empty() -> Self {
        let mut set = Self::new(std::iter::empty::<&str>());
        set.year_rule = false;
        set
    }

    /// One phrase per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn to_text(&self) -> String {
        let mut text = String::new();
        for phrase in &self.phrases {
            text.push_str(&phrase.join(" "));
            text.push('\n');
        }
        text
    }

    pub fn phrases(&self) -> &[Vec<String>] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Matched phrase spans in a word stream.
    pub fn spans<S: AsRef<str>>(&self, words: &[S]) -> Vec<PhraseMatch> {
        self.matcher.find_all(words)
    }

    /// Per-word 0/1 flags: 1 iff the word lies inside a matched phrase or is a year.
    pub fn flag_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u8> {
        let mut flags = vec![0u8; words.len()];
        for m in self.matcher.find_all(words) {
            flags[m.start..m.end].iter_mut().for_each(|f| *f = 1);
        }
        if self.year_rule {
            for (flag, word) in flags.iter_mut().zip(words) {
                if is_year(word.as_ref()) {
                    *flag = 1;
                }
            }
        }
        flags
    }
}

pub fn is_year(word: &str) -> bool {
    word.len() == 4 && word.bytes().all(|b| b.is_ascii_digit())
}

/// Per-token penalty indicators for one caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PenaltyFlags {
    pub bad: Vec<u8>,
    pub repeat: Vec<u8>,
    pub noeos: u8,
}

impl PenaltyFlags {
    pub fn detect(tokens: &TokenSeq, bad_phrases: &BadPhraseSet, vocab: &Vocab) -> Result<Self> {
        Ok(PenaltyFlags {
            bad: detect_bad(tokens, bad_phrases, vocab)?,
            repeat: detect_repeat(tokens, vocab),
            noeos: u8::from(!tokens.has_eos()),
        })
    }

    pub fn bad_count(&self) -> usize {
        self.bad.iter().map(|&f| f as usize).sum()
    }

    pub fn repeat_count(&self) -> usize {
        self.repeat.iter().map(|&f| f as usize).sum()
    }
}

pub fn detect_bad(tokens: &TokenSeq, bad_phrases: &BadPhraseSet, vocab: &Vocab) -> Result<Vec<u8>> {
    let words = vocab.words(tokens)?;
    Ok(bad_phrases.flag_words(&words))
}

/// Flags second and later occurrences of a word, except colors,
/// prepositions and articles.
pub fn detect_repeat(tokens: &TokenSeq, vocab: &Vocab) -> Vec<u8> {
    let mut seen = HashSet::new();
    tokens
        .ids()
        .iter()
        .map(|&id| {
            let first = seen.insert(id);
            u8::from(!first && id != vocab.eos && !vocab.is_repeat_exempt(id))
        })
        .collect()
}

/// Per-token returns with the pieces they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnVector {
    pub returns: Vec<f64>,
    pub sim: f64,
    pub reference: f64,
    pub noeos: u8,
    pub bad_suffix_sums: Vec<f64>,
    pub repeat_suffix_sums: Vec<f64>,
    pub gamma: f64,
}

/// Discounted per-token returns.
///
/// At `gamma == 1` the penalty suffix sums are integer counts and
/// `R(t_k) = (sim + ref - noeos) - count`, so the integer part is exact.
pub fn compute_returns(
    tokens: &TokenSeq,
    sim: f64,
    reference: f64,
    flags: &PenaltyFlags,
    gamma: f64,
) -> Result<ReturnVector> {
    let n = tokens.len();
    if flags.bad.len() != n || flags.repeat.len() != n {
        return Err(contract(format!(
            "flag lengths ({}, {}) do not match {} tokens",
            flags.bad.len(),
            flags.repeat.len(),
            n
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(contract(format!("gamma {gamma} outside (0, 1]")));
    }
    let terminal = sim + reference - f64::from(flags.noeos);

    let mut bad_suffix = vec![0.0; n];
    let mut repeat_suffix = vec![0.0; n];
    let mut returns = vec![0.0; n];
    if gamma == 1.0 {
        let (mut b, mut r) = (0u32, 0u32);
        for k in (0..n).rev() {
            b += u32::from(flags.bad[k]);
            r += u32::from(flags.repeat[k]);
            bad_suffix[k] = f64::from(b);
            repeat_suffix[k] = f64::from(r);
            returns[k] = terminal - f64::from(b + r);
        }
    } else {
        let (mut b, mut r, mut t) = (0.0, 0.0, terminal);
        for k in (0..n).rev() {
            if k + 1 < n {
                b *= gamma;
                r *= gamma;
                t *= gamma;
            }
            b += f64::from(flags.bad[k]);
            r += f64::from(flags.repeat[k]);
            bad_suffix[k] = b;
            repeat_suffix[k] = r;
            returns[k] = t - b - r;
        }
    }
    Ok(ReturnVector {
        returns,
        sim,
        reference,
        noeos: flags.noeos,
        bad_suffix_sums: bad_suffix,
        repeat_suffix_sums: repeat_suffix,
        gamma,
    })
}
