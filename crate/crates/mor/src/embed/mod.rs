//! Image and prompt embeddings.
//!
//! Degradation estimation compares an image embedding against paired
//! positive/negative prompt embeddings along seven quality dimensions. Two
//! sources are supported: a built-in statistical embedder that computes a
//! 7-feature description of the image itself, and embedding files produced
//! by an external model and looked up by id.

mod file;
mod statistical;

pub use file::{load_embedding_file, EmbeddingFile};
pub use statistical::{statistical_embed, statistical_prompt_pairs};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::numeric::norm2;

/// The seven evaluation dimensions, in canonical order. Prompt ids in
/// embedding files use these names with `.pos` / `.neg` suffixes
/// (`Edge_Clarity.neg`).
pub const DIMENSIONS: [&str; 7] = [
    "Overall_Quality",
    "Blurriness",
    "Noise",
    "Resolution",
    "Edge_Clarity",
    "Clarity",
    "Details",
];

/// A unit-norm embedding vector.
///
/// Construction normalizes; a zero vector has no direction and is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(mut v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::invalid("embedding", "empty vector"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let n = norm2(&v);
        if n < 1e-12 {
            return Err(Error::invalid("embedding", "zero-norm vector"));
        }
        for x in &mut v {
            *x /= n;
        }
        Ok(Embedding(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Positive/negative prompt embeddings for each of the seven dimensions,
/// in [`DIMENSIONS`] order, all sharing one embedding dimension.
#[derive(Debug, Clone)]
pub struct PromptPairSet {
    pairs: Vec<(Embedding, Embedding)>,
}

impl PromptPairSet {
    pub fn new(pairs: Vec<(Embedding, Embedding)>) -> Result<Self> {
        if pairs.len() != DIMENSIONS.len() {
            return Err(Error::invalid(
                "prompt pairs",
                format!("need {} pairs, got {}", DIMENSIONS.len(), pairs.len()),
            ));
        }
        let dim = pairs[0].0.dim();
        for (pos, neg) in &pairs {
            if pos.dim() != dim || neg.dim() != dim {
                return Err(Error::ShapeMismatch {
                    op: "PromptPairSet::new",
                    left: format!("dim {dim}"),
                    right: format!("dims {}/{}", pos.dim(), neg.dim()),
                });
            }
        }
        Ok(PromptPairSet { pairs })
    }

    pub fn pairs(&self) -> &[(Embedding, Embedding)] {
        &self.pairs
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.dim()
    }
}

/// Where embeddings come from.
pub enum EmbeddingSource {
    /// Compute image embeddings from pixel statistics; prompts are built in.
    Statistical,
    /// Look embeddings up in files: images by id, prompts by
    /// `<Dimension>.pos` / `<Dimension>.neg` ids.
    File {
        images: EmbeddingFile,
        prompts: EmbeddingFile,
    },
}

impl EmbeddingSource {
    /// Embedding for an image. File sources require the lookup `id` (the
    /// pixels are not consulted); the statistical source ignores `id`.
    pub fn embed_image(&self, img: &ImageF, id: Option<&str>) -> Result<Embedding> {
        match self {
            EmbeddingSource::Statistical => statistical_embed(img),
            EmbeddingSource::File { images, .. } => {
                let id = id.ok_or(Error::Missing {
                    what: "embedding id",
                    key: "file-backed sources need --id".into(),
                })?;
                images.require(id).cloned()
            }
        }
    }

    /// The prompt pairs matching this source's embedding space.
    pub fn prompt_pairs(&self) -> Result<PromptPairSet> {
        match self {
            EmbeddingSource::Statistical => Ok(statistical_prompt_pairs()),
            EmbeddingSource::File { prompts, .. } => prompt_pairs_from(prompts),
        }
    }
}

/// Assemble the seven prompt pairs from an embedding file by id.
pub fn prompt_pairs_from(file: &EmbeddingFile) -> Result<PromptPairSet> {
    let mut pairs = Vec::with_capacity(DIMENSIONS.len());
    for dim in DIMENSIONS {
        let pos = file.require(&format!("{dim}.pos"))?.clone();
        let neg = file.require(&format!("{dim}.neg"))?.clone();
        pairs.push((pos, neg));
    }
    PromptPairSet::new(pairs)
}
