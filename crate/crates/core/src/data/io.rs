//! Flat binary tensor files and line-oriented manifests.
//!
//! A tensor file is a 16-byte little-endian header followed by raw values:
//!
//! ```text
//! 0..4   magic "CTEN"
//! 4      dtype (1 = f32, 2 = u8)
//! 5      rank (1 or 2)
//! 6..8   reserved, zero
//! 8..16  two u32 dims (the second is 1 for rank 1)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTEN";
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn format_err<T>(path: &Path, reason: impl Into<String>) -> Result<T> {
    Err(Error::Format { path: path.display().to_string(), reason: reason.into() })
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.is_empty() || self.dims.len() > 2 {
            return Err(Error::Contract(format!("tensor files hold rank 1 or 2, not {}", self.dims.len())));
        }
        if self.dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!("dims {:?} vs {} values", self.dims, self.data.len())));
        }
        let mut out = Vec::with_capacity(HEADER + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for i in 0..2 {
            let d = self.dims.get(i).copied().unwrap_or(1);
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER {
            return format_err(path, "shorter than the header");
        }
        if &bytes[..4] != MAGIC {
            return format_err(path, "bad magic");
        }
        let rank = bytes[5] as usize;
        if !(1..=2).contains(&rank) {
            return format_err(path, format!("rank {rank}"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
        let dims: Vec<usize> = (0..rank).map(dim).collect();
        let n: usize = dims.iter().product();
        let body = &bytes[HEADER..];
        let data = match bytes[4] {
            1 if body.len() == 4 * n => {
                TensorData::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            }
            2 if body.len() == n => TensorData::U8(body.to_vec()),
            1 | 2 => return format_err(path, format!("payload of {} bytes for dims {dims:?}", body.len())),
            code => return format_err(path, format!("unknown dtype code {code}")),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// One manifest line: `<filename>,<split>,<has_mask>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub split: String,
    pub has_mask: bool,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{},{},{}\n", e.file, e.split, u8::from(e.has_mask))).collect()
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let [file, split, has_mask] = parts[..] else {
                return format_err(path, format!("line {}: expected 3 fields", i + 1));
            };
            let has_mask = match has_mask {
                "1" => true,
                "0" => false,
                other => return format_err(path, format!("line {}: has_mask {other:?}", i + 1)),
            };
            Ok(ManifestEntry { file: file.to_string(), split: split.to_string(), has_mask })
        })
        .collect()
}
