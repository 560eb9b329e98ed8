//! `RMC1` packed clip files.
//!
//! ```text
//! "RMC1"  u32 num_clips, T, H, W, C, dtype (0 = u8, 1 = f32)   (28 bytes)
//! u32 label per clip
//! payload: clips in row-major (clip, T, H, W, C) order
//! ```
//!
//! All integers and floats are little endian.

use std::fs;
use std::path::Path;

use super::quantize_u8;
use crate::error::{Error, Result};
use crate::neuralcore::Tensor;

const MAGIC: &[u8; 4] = b"RMC1";
const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PackedDtype {
    U8,
    F32,
}

impl PackedDtype {
    fn tag(self) -> u32 {
        match self {
            PackedDtype::U8 => 0,
            PackedDtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            PackedDtype::U8 => 1,
            PackedDtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PackedData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// Fixed-shape clips `[T, H, W, C]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedClips {
    /// `[T, H, W, C]`
    pub shape: [usize; 4],
    pub labels: Vec<u32>,
    pub data: PackedData,
}

impl PackedClips {
    pub fn new(shape: [usize; 4], dtype: PackedDtype) -> Self {
        PackedClips {
            shape,
            labels: Vec::new(),
            data: match dtype {
                PackedDtype::U8 => PackedData::U8(Vec::new()),
                PackedDtype::F32 => PackedData::F32(Vec::new()),
            },
        }
    }

    pub fn dtype(&self) -> PackedDtype {
        match self.data {
            PackedData::U8(_) => PackedDtype::U8,
            PackedData::F32(_) => PackedDtype::F32,
        }
    }

    pub fn clip_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Appends a `[T, H, W, C]` clip of reals; u8 storage quantizes to the
    /// nearest level of `v * 255`.
    pub fn push(&mut self, clip: &Tensor, label: u32) -> Result<()> {
        if clip.shape() != self.shape {
            return Err(Error::InvalidShape {
                op: "packed clip",
                detail: format!("clip shape {:?}, file shape {:?}", clip.shape(), self.shape),
            });
        }
        match &mut self.data {
            PackedData::U8(v) => v.extend(clip.data().iter().map(|&x| quantize_u8(x))),
            PackedData::F32(v) => v.extend(clip.data().iter().map(|&x| x as f32)),
        }
        self.labels.push(label);
        Ok(())
    }

    /// Clip `i` as reals (u8 storage is divided by 255).
    pub fn clip(&self, i: usize) -> Tensor {
        let n = self.clip_len();
        let data = match &self.data {
            PackedData::U8(v) => v[i * n..(i + 1) * n].iter().map(|&b| b as f64 / 255.0).collect(),
            PackedData::F32(v) => v[i * n..(i + 1) * n].iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.shape.to_vec(), data).expect("shape checked on push")
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.clip_len();
        let payload_len = match &self.data {
            PackedData::U8(v) => v.len(),
            PackedData::F32(v) => v.len(),
        };
        if payload_len != n * self.len() {
            return Err(Error::format(
                "RMC1",
                format!("payload of {payload_len} values for {} clips of {n}", self.len()),
            ));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.len() + payload_len * self.dtype().width());
        out.extend_from_slice(MAGIC);
        let header = [self.len(), self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        for v in header {
            let v = u32::try_from(v).map_err(|_| Error::format("RMC1", format!("{v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.dtype().tag().to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        match &self.data {
            PackedData::U8(v) => out.extend_from_slice(v),
            PackedData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("RMC1", "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("RMC1", "bad magic"));
        }
        let word = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        let (count, shape) = (word(0), [word(1), word(2), word(3), word(4)]);
        let dtype = match word(5) {
            0 => PackedDtype::U8,
            1 => PackedDtype::F32,
            t => return Err(Error::format("RMC1", format!("unknown dtype tag {t}"))),
        };
        let clip_len: usize = shape.iter().product();
        let expected = count
            .checked_mul(4 + clip_len * dtype.width())
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::format("RMC1", "header sizes overflow"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                "RMC1",
                format!("file is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let labels_end = HEADER_LEN + 4 * count;
        let labels = bytes[HEADER_LEN..labels_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let payload = &bytes[labels_end..];
        let data = match dtype {
            PackedDtype::U8 => PackedData::U8(payload.to_vec()),
            PackedDtype::F32 => PackedData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        Ok(PackedClips {
            shape,
            labels,
            data,
        })
    }

    /// Errors unless the clips are stored as `dtype`.
    pub fn expect_dtype(&self, dtype: PackedDtype) -> Result<()> {
        if self.dtype() != dtype {
            return Err(Error::format(
                "RMC1",
                format!("dtype mismatch: stored {:?}, expected {dtype:?}", self.dtype()),
            ));
        }
        Ok(())
    }
}

pub fn write_packed(path: &Path, clips: &PackedClips) -> Result<()> {
    let bytes = clips.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: &Path) -> Result<PackedClips> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PackedClips::decode(&bytes)
}
