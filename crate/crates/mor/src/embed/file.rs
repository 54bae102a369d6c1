//! Embedding file format.
//!
//! Plain text: a `dim <D>` header, then one entry per line — an id followed
//! by `D` whitespace-separated numbers. `#` starts a comment. Vectors are
//! normalized to unit length on load; ids must be unique.
//!
//! ```text
//! # produced by an external embedding model
//! dim 4
//! Overall_Quality.pos  0.12 -0.40 0.88 0.01
//! Overall_Quality.neg -0.30  0.55 0.02 0.77
//! frame_000            0.25  0.25 0.25 0.25
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::Embedding;

/// A parsed embedding file: fixed dimension, unique ids.
#[derive(Debug, Clone)]
pub struct EmbeddingFile {
    dim: usize,
    entries: BTreeMap<String, Embedding>,
}

impl EmbeddingFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let mut dim: Option<usize> = None;
        let mut entries = BTreeMap::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let head = tokens.next().expect("non-empty line has a token");

            let Some(dim) = dim else {
                if head != "dim" {
                    return Err(perr(line_no, format!("expected `dim <D>` header, got {raw:?}")));
                }
                let d: usize = tokens
                    .next()
                    .ok_or_else(|| perr(line_no, "missing dimension value".into()))?
                    .parse()
                    .map_err(|_| perr(line_no, "bad dimension value".into()))?;
                if d == 0 {
                    return Err(perr(line_no, "dimension must be positive".into()));
                }
                if tokens.next().is_some() {
                    return Err(perr(line_no, "trailing tokens after `dim <D>`".into()));
                }
                dim = Some(d);
                continue;
            };

            let values: Vec<f64> = tokens
                .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
                .collect::<std::result::Result<_, _>>()
                .map_err(|msg| perr(line_no, msg))?;
            if values.len() != dim {
                return Err(perr(
                    line_no,
                    format!("entry {head:?} has {} values, want {dim}", values.len()),
                ));
            }
            let embedding = Embedding::new(values).map_err(|e| perr(line_no, e.to_string()))?;
            if entries.insert(head.to_string(), embedding).is_some() {
                return Err(perr(line_no, format!("duplicate id {head:?}")));
            }
        }

        let dim = dim.ok_or_else(|| perr(0, "empty file: missing `dim <D>` header".into()))?;
        Ok(EmbeddingFile { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.entries.get(id)
    }

    /// Like [`get`](Self::get) but reports the missing id.
    pub fn require(&self, id: &str) -> Result<&Embedding> {
        self.get(id).ok_or(Error::Missing {
            what: "embedding id",
            key: id.to_string(),
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Convenience wrapper for [`EmbeddingFile::load`].
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    EmbeddingFile::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_normalizes() {
        let text = "\
# comment line
dim 3

a  3 0 4   # inline comment
b -1 0 0
";
        let f = EmbeddingFile::parse(text, "mem.emb").unwrap();
        assert_eq!(f.dim(), 3);
        assert_eq!(f.len(), 2);
        let a = f.get("a").unwrap();
        assert!((a.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((a.as_slice()[2] - 0.8).abs() < 1e-15);
        assert!(f.get("c").is_none());
        assert!(f.require("c").is_err());
    }

    #[test]
    fn rejects_malformed_files() {
        let cases: &[(&str, &str)] = &[
            ("a 1 2 3\n", "data before header"),
            ("dim 0\n", "zero dim"),
            ("dim 2\na 1\n", "wrong count"),
            ("dim 2\na 1 x\n", "bad number"),
            ("dim 2\na 1 2\na 3 4\n", "duplicate id"),
            ("dim 2\na 0 0\n", "zero vector"),
            ("", "empty file"),
        ];
        for (text, why) in cases {
            assert!(EmbeddingFile::parse(text, "m").is_err(), "{why}");
        }
    }

    #[test]
    fn errors_carry_path_and_line() {
        let err = EmbeddingFile::parse("dim 2\nok 1 2\nbad 1\n", "my.emb")
            .unwrap_err()
            .to_string();
        assert!(err.contains("my.emb:3"), "{err}");
    }
}
