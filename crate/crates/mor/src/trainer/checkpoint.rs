//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MORK" | version u32
//! tensor count u32
//!   per tensor: name len u32, name bytes, rows u32, cols u32, f64 * rows*cols
//! optimizer count u32
//!   per state: name len u32, name bytes, len u32, step u64, m f64*len, v f64*len
//! rng state u64
//! iteration u64
//! config echo: len u32, UTF-8 bytes
//! ```
//!
//! Serialization is order-preserving and bit-exact on the f64 payloads, so
//! save -> load -> save reproduces the file byte for byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{AdamState, Matrix};

const MAGIC: [u8; 4] = *b"MORK";

/// On-disk format version, bumped on any layout change.
pub const FORMAT_VERSION: u32 = 1;

/// A complete training state snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
    pub optimizers: Vec<(String, AdamState)>,
    pub rng_state: u64,
    pub iteration: u64,
    pub config_text: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&(self.optimizers.len() as u32).to_le_bytes());
        for (name, state) in &self.optimizers {
            write_str(&mut out, name);
            out.extend_from_slice(&(state.first_moment().len() as u32).to_le_bytes());
            out.extend_from_slice(&(state.step_count() as u64).to_le_bytes());
            for v in state.first_moment() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in state.second_moment() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        write_str(&mut out, &self.config_text);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }

        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f64s(rows.checked_mul(cols).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} dimensions overflow"))
            })?)?;
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| {
                Error::Checkpoint(format!("tensor {name}: {e}"))
            })?;
            tensors.push((name, m));
        }

        let n_opts = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n_opts);
        for _ in 0..n_opts {
            let name = r.string()?;
            let len = r.u32()? as usize;
            let step = r.u64()?;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            let state = AdamState::from_parts(m, v, step).map_err(|e| {
                Error::Checkpoint(format!("optimizer {name}: {e}"))
            })?;
            optimizers.push((name, state));
        }

        let rng_state = r.u64()?;
        let iteration = r.u64()?;
        let config_text = r.string()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            tensors,
            optimizers,
            rng_state,
            iteration,
            config_text,
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Missing {
                what: "checkpoint tensor",
                key: name.to_string(),
            })
    }

    pub fn optimizer(&self, name: &str) -> Result<&AdamState> {
        self.optimizers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Missing {
                what: "checkpoint optimizer state",
                key: name.to_string(),
            })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
    }
}
