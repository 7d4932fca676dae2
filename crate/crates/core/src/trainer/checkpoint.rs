//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CIMK" | version u32 | step u64
//! rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! config_len u64 | config utf-8 bytes
//! entry_count u64
//!   name_len u32 | name | dtype u8 | ndim u32 | dims u64 x ndim | offset u64
//! payload_len u64 | payload (f64 little-endian, offsets relative to its start)
//! ```

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CIMK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name} has unknown dtype code {code}")]
    BadDtype { name: String, code: u8 },
    #[error("checkpoint {0} is not valid utf-8")]
    BadUtf8(&'static str),
    #[error("tensor {name} payload range is outside the file")]
    PayloadRange { name: String },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint contains unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name}: config expects {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Enough to resume a ChaCha stream at the exact word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngState,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let clen = r.len("config length")?;
        let config = String::from_utf8(r.take(clen, "config")?.to_vec()).map_err(|_| CheckpointError::BadUtf8("config"))?;
        let count = r.len("entry count")?;
        let mut dir = Vec::new();
        for _ in 0..count {
            let nlen = r.u32("entry name length")? as usize;
            let name =
                String::from_utf8(r.take(nlen, "entry name")?.to_vec()).map_err(|_| CheckpointError::BadUtf8("entry name"))?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::BadDtype { name, code: dtype });
            }
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.len("dims")).collect::<Result<Vec<_>>>()?;
            let offset = r.len("offset")?;
            dir.push((name, shape, offset));
        }
        let plen = r.len("payload length")?;
        let payload = r.take(plen, "payload")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let end = n.checked_mul(8).and_then(|b| b.checked_add(offset));
            let Some(raw) = end.and_then(|e| payload.get(offset..e)) else {
                return Err(CheckpointError::PayloadRange { name });
            };
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|_| CheckpointError::PayloadRange { name: name.clone() })?;
            tensors.push((name, t));
        }
        Ok(Self {
            step,
            rng: RngState { seed, stream, word_pos },
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Remove and return the named tensor, checking its shape.
    pub fn take_tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let Some(i) = self.tensors.iter().position(|(n, _)| n == name) else {
            return Err(CheckpointError::MissingTensor(name.to_string()));
        };
        let (name, t) = self.tensors.swap_remove(i);
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(what));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CheckpointError::Truncated(what))
    }
}
