use crate::error::{contract, Result};

/// Weight of the standardized retrieval term.
pub const RS_WEIGHT: f64 = 0.3;
/// Guard added to the standard deviation of degenerate batches.
pub const RS_EPS: f64 = 1e-8;

fn check_rows(name: &str, rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(contract(format!("{name} row {i} has dimension {}, expected {dim}", row.len())));
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(contract(format!("{name} row {i} is not unit-norm (|x| = {norm})")));
        }
    }
    Ok(())
}

/// `diag(softmax(S, 0) * softmax(S, 1))` for the cosine matrix
/// `S[i][j] = cos(image_i, text_j)`.
///
/// Axis 0 normalizes over images for a fixed text, axis 1 over texts for a
/// fixed image.
pub fn dual_softmax_diagonal(image_embs: &[Vec<f64>], text_embs: &[Vec<f64>]) -> Vec<f64> {
    let b = image_embs.len();
    let s: Vec<Vec<f64>> = image_embs
        .iter()
        .map(|img| {
            text_embs
                .iter()
                .map(|txt| img.iter().zip(txt).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    (0..b)
        .map(|k| {
            let col_max = (0..b).map(|i| s[i][k]).fold(f64::NEG_INFINITY, f64::max);
            let col_sum: f64 = (0..b).map(|i| (s[i][k] - col_max).exp()).sum();
            let row_max = s[k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row_sum: f64 = s[k].iter().map(|v| (v - row_max).exp()).sum();
            let over_images = (s[k][k] - col_max).exp() / col_sum;
            let over_texts = (s[k][k] - row_max).exp() / row_sum;
            over_images * over_texts
        })
        .collect()
}

/// Matching score plus `weight` times the batch-standardized dual-softmax
/// diagonal. Standardization uses the population standard deviation.
pub fn rs_reward(
    image_embs: &[Vec<f64>],
    text_embs: &[Vec<f64>],
    itm_scores: &[f64],
    weight: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let b = image_embs.len();
    if b < 2 {
        return Err(contract("retrieval reward needs a batch of at least 2"));
    }
    if text_embs.len() != b || itm_scores.len() != b {
        return Err(contract(format!(
            "batch sizes differ: {b} images, {} texts, {} scores",
            text_embs.len(),
            itm_scores.len()
        )));
    }
    let dim = image_embs[0].len();
    check_rows("image", image_embs, dim)?;
    check_rows("text", text_embs, dim)?;

    let d = dual_softmax_diagonal(image_embs, text_embs);
    let mean = d.iter().sum::<f64>() / b as f64;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / b as f64).sqrt();
    Ok(d.iter()
        .zip(itm_scores)
        .map(|(dk, score)| score + weight * (dk - mean) / (std + eps))
        .collect())
}
