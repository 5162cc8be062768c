//! `SCKT` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "SCKT" u32 version u64 config_hash u32 epoch u64 adam_step f64 lr
//! u32 len, config JSON
//! u32 len, metadata JSON
//! u32 record_count
//! record*: u16 len, name | u8 ndim | u32 dim* | u8 dtype (0 = f32) | u64 n | f32 * n | u32 crc32
//! u32 crc32 of everything above
//! ```
//!
//! Record names are `param/<tensor>`, `adam.m/<tensor>`, `adam.v/<tensor>`
//! and, when present, `best/<tensor>`.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::network::{ModelConfig, ModelParams, Params};

pub const MAGIC: &[u8; 4] = b"SCKT";
pub const FORMAT_VERSION: u32 = 1;

/// Adam moments, one buffer per tensor of the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        OptimizerState { step: 0, lr, m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u32,
    /// Free-form training metadata.
    pub meta: serde_json::Value,
    /// Best-so-far parameters, kept for resuming early stopping.
    pub best: Option<ModelParams>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: OptimizerState, epoch: u32) -> Self {
        Checkpoint { params, optimizer, epoch, meta: serde_json::Value::Null, best: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.params.config.hash64().to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&self.optimizer.lr.to_le_bytes());
        put_blob(&mut out, serde_json::to_string(&self.params.config).expect("config serializes").as_bytes());
        put_blob(&mut out, self.meta.to_string().as_bytes());

        let mut records: Vec<(String, &[usize], &[f32])> = Vec::new();
        for t in &self.params.tensors {
            records.push((format!("param/{}", t.name), &t.shape, &t.data));
        }
        for (i, t) in self.params.tensors.iter().enumerate() {
            records.push((format!("adam.m/{}", t.name), &t.shape, &self.optimizer.m[i]));
            records.push((format!("adam.v/{}", t.name), &t.shape, &self.optimizer.v[i]));
        }
        if let Some(best) = &self.best {
            for t in &best.tensors {
                records.push((format!("best/{}", t.name), &t.shape, &t.data));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, shape, data) in records {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(0);
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container. With `expected` set, a config mismatch is
    /// reported before any tensor is read.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated);
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::Checksum("file".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let hash = r.u64()?;
        if let Some(cfg) = expected {
            if cfg.hash64() != hash {
                return Err(CheckpointError::ConfigMismatch { found: hash, expected: cfg.hash64() });
            }
        }
        let epoch = r.u32()?;
        let step = r.u64()?;
        let lr = r.f64()?;
        let config: ModelConfig = serde_json::from_slice(r.blob()?).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
        if config.hash64() != hash {
            return Err(CheckpointError::Malformed("config hash does not match stored config".into()));
        }
        let meta: serde_json::Value = serde_json::from_slice(r.blob()?).map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;

        let mut params = Params::<f32>::zeros(&config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut optimizer = OptimizerState::new(&params, lr);
        optimizer.step = step;
        let mut best: Option<ModelParams> = None;
        let mut seen = vec![[false; 3]; params.tensors.len()];

        let n = r.u32()?;
        for _ in 0..n {
            let start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| CheckpointError::Malformed("record name".into()))?.to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if r.take(1)?[0] != 0 {
                return Err(CheckpointError::Malformed(format!("{name}: unsupported dtype")));
            }
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let end = r.pos;
            let crc = r.u32()?;
            if crc32fast::hash(&body[start..end]) != crc {
                return Err(CheckpointError::Checksum(name));
            }
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

            let (kind, tensor) = name.split_once('/').ok_or_else(|| CheckpointError::Malformed(format!("record {name}")))?;
            let idx = params
                .tensors
                .iter()
                .position(|t| t.name == tensor)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown tensor {tensor}")))?;
            if params.tensors[idx].shape != shape || params.tensors[idx].data.len() != data.len() {
                return Err(CheckpointError::Malformed(format!("{name}: shape {shape:?}")));
            }
            match kind {
                "param" => {
                    params.tensors[idx].data = data;
                    seen[idx][0] = true;
                }
                "adam.m" => {
                    optimizer.m[idx] = data;
                    seen[idx][1] = true;
                }
                "adam.v" => {
                    optimizer.v[idx] = data;
                    seen[idx][2] = true;
                }
                "best" => {
                    best.get_or_insert_with(|| params.zeros_like()).tensors[idx].data = data;
                }
                _ => return Err(CheckpointError::Malformed(format!("record {name}"))),
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        if let Some(i) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
            return Err(CheckpointError::Malformed(format!("missing records for {}", params.tensors[i].name)));
        }
        Ok(Checkpoint { params, optimizer, epoch, meta, best })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, expected).map_err(|kind| Error::Checkpoint { path: path.to_path_buf(), kind })
    }
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> std::result::Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
