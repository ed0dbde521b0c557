use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::textcore::{Scene, TokenId, TokenSeq, Vocab};

/// Attribute-coverage scorer standing in for an image-text matching logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOracle {
    /// Reward per correctly named scene attribute.
    pub alpha: f64,
    /// Cost per named attribute value missing from the scene.
    pub beta: f64,
    pub scale: f64,
}

impl Default for SimOracle {
    fn default() -> Self {
        SimOracle {
            alpha: 1.0,
            beta: 1.0,
            scale: 1.0,
        }
    }
}

/// Which form of the matching score is used as the similarity reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimVariant {
    /// The positive-class logit itself.
    #[default]
    RawLogit,
    /// Two-class softmax probability of the match class, with a zero
    /// no-match logit.
    Probability,
}

impl SimVariant {
    pub fn apply(self, logit: f64) -> f64 {
        match self {
            SimVariant::RawLogit => logit,
            SimVariant::Probability => 1.0 / (1.0 + (-logit).exp()),
        }
    }
}

/// `scale * (alpha * |mentioned ∩ scene| - beta * |mentioned \ scene|)`, where
/// `mentioned` is the set of attribute words appearing in the caption.
pub fn sim_score(scene: &Scene, caption: &TokenSeq, oracle: &SimOracle, vocab: &Vocab) -> f64 {
    let values = scene.value_set();
    let mentioned: BTreeSet<TokenId> = caption
        .ids()
        .iter()
        .copied()
        .filter(|&id| vocab.basis_index(id).is_some())
        .collect();
    let correct = mentioned.intersection(&values).count() as f64;
    let hallucinated = mentioned.difference(&values).count() as f64;
    oracle.scale * (oracle.alpha * correct - oracle.beta * hallucinated)
}
