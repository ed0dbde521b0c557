use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{config_err, contract, Error, Result};
use crate::textcore::{TokenId, TokenSeq, Vocab};

/// Additively smoothed n-gram model over the vocabulary's emittable tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RefLm {
    order: usize,
    smoothing: f64,
    support: usize,
    bos: TokenId,
    vocab_hash: String,
    counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>,
    totals: BTreeMap<Vec<TokenId>, u64>,
}

const MAGIC: &str = "vlrm-reflm 1";

impl RefLm {
    /// Unigram model with no observations: every emittable token equally likely.
    pub fn uniform(vocab: &Vocab) -> Self {
        RefLm {
            order: 1,
            smoothing: 1.0,
            support: vocab.emittable().count(),
            bos: vocab.bos,
            vocab_hash: vocab.hash(),
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn context(&self, history: &[TokenId]) -> Vec<TokenId> {
        let want = self.order - 1;
        let mut ctx = vec![self.bos; want.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(want)..]);
        ctx
    }

    /// `log p(next | history)`, using the last `order - 1` tokens of history.
    pub fn log_prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        let ctx = self.context(history);
        let count = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        ((count + self.smoothing) / (total + self.smoothing * self.support as f64)).ln()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "order {}", self.order).unwrap();
        writeln!(out, "smoothing {:?}", self.smoothing).unwrap();
        writeln!(out, "support {}", self.support).unwrap();
        writeln!(out, "bos {}", self.bos).unwrap();
        writeln!(out, "vocab_hash {}", self.vocab_hash).unwrap();
        for (ctx, nexts) in &self.counts {
            let ctx_text = if ctx.is_empty() {
                "-".to_string()
            } else {
                ctx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
            };
            for (next, count) in nexts {
                writeln!(out, "{ctx_text}\t{next}\t{count}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("reflm dump: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {name}")))
        };
        let order: usize = field("order")?.parse().map_err(|_| bad("order"))?;
        let smoothing: f64 = field("smoothing")?.parse().map_err(|_| bad("smoothing"))?;
        let support: usize = field("support")?.parse().map_err(|_| bad("support"))?;
        let bos: TokenId = field("bos")?.parse().map_err(|_| bad("bos"))?;
        let vocab_hash = field("vocab_hash")?;
        let mut lm = RefLm {
            order,
            smoothing,
            support,
            bos,
            vocab_hash,
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let mut parts = line.split('\t');
            let (Some(ctx), Some(next), Some(count), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("malformed count line"));
            };
            let ctx: Vec<TokenId> = if ctx == "-" {
                Vec::new()
            } else {
                ctx.split(' ')
                    .map(|t| t.parse().map_err(|_| bad("context id")))
                    .collect::<Result<_>>()?
            };
            let next: TokenId = next.parse().map_err(|_| bad("next id"))?;
            let count: u64 = count.parse().map_err(|_| bad("count"))?;
            *lm.totals.entry(ctx.clone()).or_default() += count;
            lm.counts.entry(ctx).or_default().insert(next, count);
        }
        Ok(lm)
    }
}

/// Counts n-grams over the reference captions, each padded on the left with
/// `<bos>` and predicting through `<eos>`.
pub fn train_reflm(corpus: &[TokenSeq], vocab: &Vocab, order: usize, smoothing: f64) -> Result<RefLm> {
    if order < 1 {
        return Err(config_err("n-gram order must be at least 1"));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(config_err("smoothing must be positive so unseen words keep mass"));
    }
    if corpus.is_empty() {
        return Err(contract("reference corpus is empty"));
    }
    let mut lm = RefLm {
        order,
        smoothing,
        ..RefLm::uniform(vocab)
    };
    for caption in corpus {
        let ids = caption.ids();
        for k in 0..ids.len() {
            let ctx = lm.context(&ids[..k]);
            *lm.counts.entry(ctx.clone()).or_default().entry(ids[k]).or_default() += 1;
            *lm.totals.entry(ctx).or_default() += 1;
        }
    }
    Ok(lm)
}

/// Mean per-token log-probability of the caption, `<eos>` included.
pub fn ref_score(caption: &TokenSeq, lm: &RefLm) -> f64 {
    let ids = caption.ids();
    let total: f64 = (0..ids.len()).map(|k| lm.log_prob(&ids[..k], ids[k])).sum();
    total / ids.len() as f64
}
