//! Binary checkpoint format.
//!
//! ```text
//! "KMCK"  u32 version  u64 header_len  header (JSON)  u32 n_arrays
//! per array: u32 name_len  name  u32 ndim  u64 dims[ndim]  u64 payload_len  f32 LE payload
//! ```
//!
//! All integers are little-endian. Arrays hold the parameters in registration
//! order followed by `adam.m.<name>` and `adam.v.<name>` for each parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, ModelConfig};
use crate::tensor::{AdamState, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"KMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file while reading {what}")]
    Truncated { what: String },
    #[error("array {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("checkpoint model config differs from requested config\n  checkpoint: {found}\n  requested:  {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Scalar training state stored alongside the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    /// Run seed. Every random stream is keyed by `(seed, step)`, so this and
    /// `step` are the whole generator state.
    pub seed: u64,
    pub skipped_batches: u64,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
    pub adam: AdamState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    put_u64(out, (data.len() * 4) as u64);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Truncated {
            what: what.to_string(),
        })
    }
}

struct RawArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_array(r: &mut Reader<'_>, index: usize) -> Result<RawArray, CheckpointError> {
    let what = format!("array {index}");
    let name_len = r.u32(&what)? as usize;
    let name = std::str::from_utf8(r.take(name_len, &what)?)
        .map_err(|_| CheckpointError::Corrupt(format!("{what}: name is not UTF-8")))?
        .to_string();
    let what = format!("array {name}");
    let ndim = r.u32(&what)? as usize;
    let mut shape = Vec::with_capacity(ndim.min(8));
    for _ in 0..ndim {
        shape.push(r.len(&what)?);
    }
    let payload_len = r.len(&what)?;
    let bytes = r.take(payload_len, &what)?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| CheckpointError::ShapeMismatch {
            name: name.clone(),
            detail: format!("dims {shape:?} overflow"),
        })?;
    if numel.checked_mul(4) != Some(payload_len) {
        return Err(CheckpointError::ShapeMismatch {
            name,
            detail: format!(
                "dims {shape:?} need {} payload bytes, found {payload_len}",
                numel * 4
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawArray { name, shape, data })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_u32(&mut out, (self.params.len() * 3) as u32);
        for (_, name, t) in self.params.iter() {
            put_array(&mut out, name, &t.shape, &t.data);
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (i, (_, name, t)) in self.params.iter().enumerate() {
                let zeros;
                let data = match moments.get(i) {
                    Some(m) => m.as_slice(),
                    None => {
                        zeros = vec![0.0; t.numel()];
                        &zeros
                    }
                };
                put_array(&mut out, &format!("{prefix}{name}"), &t.shape, data);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.len("header length")?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)?;
        let n = r.u32("array count")? as usize;
        if !n.is_multiple_of(3) {
            return Err(CheckpointError::Corrupt(format!(
                "array count {n} is not a multiple of 3"
            )));
        }
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            arrays.push(read_array(&mut r, i)?);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }

        let np = n / 3;
        let mut params = ParamSet::new();
        for a in &arrays[..np] {
            if params.id(&a.name).is_some() {
                return Err(CheckpointError::Corrupt(format!(
                    "duplicate array {}",
                    a.name
                )));
            }
            let t = Tensor::new(a.shape.clone(), a.data.clone()).map_err(|e| {
                CheckpointError::ShapeMismatch {
                    name: a.name.clone(),
                    detail: e.to_string(),
                }
            })?;
            params.add(a.name.clone(), t);
        }
        let mut m = Vec::with_capacity(np);
        let mut v = Vec::with_capacity(np);
        for (k, (prefix, dst)) in [("adam.m.", &mut m), ("adam.v.", &mut v)]
            .into_iter()
            .enumerate()
        {
            for (i, a) in arrays[np * (k + 1)..np * (k + 2)].iter().enumerate() {
                let pname = &arrays[i].name;
                if a.name != format!("{prefix}{pname}") {
                    return Err(CheckpointError::Corrupt(format!(
                        "expected {prefix}{pname}, found {}",
                        a.name
                    )));
                }
                if a.shape != arrays[i].shape {
                    return Err(CheckpointError::ShapeMismatch {
                        name: a.name.clone(),
                        detail: format!(
                            "shape {:?} differs from parameter shape {:?}",
                            a.shape, arrays[i].shape
                        ),
                    });
                }
                dst.push(a.data.clone());
            }
        }
        let adam = AdamState {
            m,
            v,
            t: header.adam_t,
        };
        Ok(Checkpoint {
            header,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        // Write to a sibling then rename, so a crash never leaves half a file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    /// Loads and rejects a checkpoint whose model config differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        ck.check_config(expected)?;
        Ok(ck)
    }

    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        if self.header.model.normalized() != expected.normalized() {
            return Err(CheckpointError::ConfigMismatch {
                found: serde_json::to_string(&self.header.model.normalized())?,
                expected: serde_json::to_string(&expected.normalized())?,
            });
        }
        Ok(())
    }
}
