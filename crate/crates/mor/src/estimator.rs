//! Degradation severity scores.
//!
//! For each quality dimension the image embedding is compared against the
//! dimension's positive (good-quality) and negative (degraded) prompt
//! embeddings by cosine similarity, and the two similarities compete through
//! a two-way softmax. The resulting score lies in `(0, 1)`: 0.5 means the
//! image sits exactly between the prompts, higher means closer to the
//! degraded prompt. The seven per-dimension scores condition the adapter
//! router; their mean is the scalar severity used by the balance loss.

use crate::embed::{Embedding, EmbeddingSource, PromptPairSet, DIMENSIONS};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::numeric::cosine_similarity;

/// Severity score for one dimension:
/// `exp(d_n) / (exp(d_p) + exp(d_n))` with `d_p = cos(e, pos)` and
/// `d_n = cos(e, neg)`.
pub fn dimension_score(e_img: &Embedding, pos: &Embedding, neg: &Embedding) -> Result<f64> {
    let d_p = cosine_similarity(e_img.as_slice(), pos.as_slice())?;
    let d_n = cosine_similarity(e_img.as_slice(), neg.as_slice())?;
    let (ep, en) = (d_p.exp(), d_n.exp());
    Ok(en / (ep + en))
}

/// All seven dimension scores, in [`DIMENSIONS`] order.
pub fn estimate(e_img: &Embedding, prompts: &PromptPairSet) -> Result<Vec<f64>> {
    if e_img.dim() != prompts.dim() {
        return Err(Error::ShapeMismatch {
            op: "estimate",
            left: format!("image embedding dim {}", e_img.dim()),
            right: format!("prompt dim {}", prompts.dim()),
        });
    }
    prompts
        .pairs()
        .iter()
        .map(|(pos, neg)| dimension_score(e_img, pos, neg))
        .collect()
}

/// Collapse per-dimension scores to a single severity: the arithmetic mean.
pub fn aggregate_scalar(scores: &[f64]) -> f64 {
    assert!(!scores.is_empty(), "no scores to aggregate");
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Scalar severity of an image under the statistical embedder. This is what
/// the training loop uses to weight the router balance loss per sample.
pub fn severity(img: &ImageF) -> Result<f64> {
    let source = EmbeddingSource::Statistical;
    let scores = estimate(&source.embed_image(img, None)?, &source.prompt_pairs()?)?;
    Ok(aggregate_scalar(&scores))
}

/// Scores paired with their dimension names, for reporting.
pub fn named_scores(scores: &[f64]) -> Vec<(&'static str, f64)> {
    assert_eq!(scores.len(), DIMENSIONS.len());
    DIMENSIONS.iter().copied().zip(scores.iter().copied()).collect()
}
