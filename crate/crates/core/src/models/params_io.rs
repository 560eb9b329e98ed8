//! `RMP1` tensor files: trained parameters and training checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "RMP1"  [u8; 32] config hash  u32 dtype (1 = f32, 2 = f64)
//! u32 metadata_len  metadata (UTF-8 JSON)
//! u32 num_tensors
//! per tensor: u32 name_len, name, u32 ndim, u32 dims[ndim]
//! payload: every tensor's data in table order
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde_json::Value;

use super::config::ModelConfig;
use super::network::{build, Network};
use crate::error::{Error, Result};
use crate::neuralcore::Tensor;

const MAGIC: &[u8; 4] = b"RMP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::format("RMP1", format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorFile {
    pub config_hash: [u8; 32],
    pub dtype: Dtype,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("RMP1", format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl TensorFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&self.dtype.code().to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("JSON value serializes");
        push_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(&meta);
        push_u32(&mut buf, self.tensors.len())?;
        for (name, t) in &self.tensors {
            push_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, t.ndim())?;
            for &d in t.shape() {
                push_u32(&mut buf, d)?;
            }
        }
        for (_, t) in &self.tensors {
            match self.dtype {
                Dtype::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("RMP1", "bad magic"));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let dtype = Dtype::from_code(r.u32()?)?;
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format("RMP1", format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("RMP1", "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| {
                Error::format("RMP1", format!("{name}: size overflow"))
            })?)?;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::format("RMP1", format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("RMP1", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(TensorFile {
            config_hash,
            dtype,
            metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("RMP1", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes trained parameters and running statistics, tagged with the model
/// configuration hash and carrying the configuration itself as metadata.
pub fn save_params(net: &Network, path: &Path, dtype: Dtype) -> Result<()> {
    TensorFile {
        config_hash: net.config().hash(),
        dtype,
        metadata: serde_json::json!({ "model": net.config() }),
        tensors: net.export_tensors(),
    }
    .write(path)
}

/// Loads parameters into a network built from `config`, refusing files
/// written for any other configuration.
pub fn load_params(path: &Path, config: &ModelConfig) -> Result<Network> {
    let file = TensorFile::read(path)?;
    if file.config_hash != config.hash() {
        return Err(Error::HashMismatch {
            expected: config.hash_hex(),
            found: hex::encode(file.config_hash),
        });
    }
    network_from_file(&file, config.clone())
}

/// Loads a parameter file using the configuration stored inside it.
pub fn load_params_embedded(path: &Path) -> Result<Network> {
    let file = TensorFile::read(path)?;
    let config: ModelConfig = serde_json::from_value(file.metadata["model"].clone())
        .map_err(|e| Error::format("RMP1", format!("embedded model config: {e}")))?;
    if config.hash() != file.config_hash {
        return Err(Error::HashMismatch {
            expected: hex::encode(file.config_hash),
            found: config.hash_hex(),
        });
    }
    network_from_file(&file, config)
}

fn network_from_file(file: &TensorFile, config: ModelConfig) -> Result<Network> {
    // Initial values are overwritten, so any seed will do.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = build(config, &mut rng)?;
    net.import_tensors(&file.tensors)?;
    Ok(net)
}
