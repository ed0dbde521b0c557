use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Two-class linear classifier applied to each output query embedding.
///
/// Row 0 of `weight` produces the positive ("match") logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmHead {
    pub dim: usize,
    pub queries: usize,
    /// `2 x dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItmOutput {
    /// Mean over queries of the match-class softmax probability.
    pub probability: f64,
    /// Mean over queries of the pre-softmax match logit.
    pub raw_logit: f64,
}

impl ItmHead {
    pub fn new(dim: usize, queries: usize, weight: Vec<f64>, bias: [f64; 2]) -> Result<Self> {
        if weight.len() != 2 * dim || queries == 0 {
            return Err(contract(format!(
                "ITM head expects 2x{dim} weights and at least one query"
            )));
        }
        Ok(ItmHead {
            dim,
            queries,
            weight,
            bias,
        })
    }

    pub fn logits(&self, query: &[f64]) -> [f64; 2] {
        let row = |r: usize| -> f64 {
            self.weight[r * self.dim..(r + 1) * self.dim]
                .iter()
                .zip(query)
                .map(|(w, z)| w * z)
                .sum::<f64>()
                + self.bias[r]
        };
        [row(0), row(1)]
    }
}

/// Averages the match probability over the `queries x dim` embeddings `z`
/// (row-major).
pub fn itm_aggregate(z: &[f64], head: &ItmHead) -> Result<ItmOutput> {
    if z.len() != head.queries * head.dim {
        return Err(contract(format!(
            "query matrix has {} values, head expects {}x{}",
            z.len(),
            head.queries,
            head.dim
        )));
    }
    let (mut prob, mut logit) = (0.0, 0.0);
    for query in z.chunks_exact(head.dim) {
        let [pos, neg] = head.logits(query);
        // softmax([pos, neg])[0], written to stay finite for large gaps
        prob += 1.0 / (1.0 + (neg - pos).exp());
        logit += pos;
    }
    let q = head.queries as f64;
    Ok(ItmOutput {
        probability: prob / q,
        raw_logit: logit / q,
    })
}
