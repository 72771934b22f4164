//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"DRDCCKPT"
//! version    u32      1
//! meta_len   u32      length of the JSON metadata entry
//! meta       meta_len bytes of UTF-8 JSON
//! count      u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     prod(dims) f32 values
//! ```
//!
//! Files are written to a sibling temporary path and renamed into place, so a
//! reader never observes a partially written container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::NamedArray;

const MAGIC: &[u8; 8] = b"DRDCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(metadata: Value, arrays: Vec<NamedArray>) -> Self {
        Self { metadata, arrays }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for arr in &self.arrays {
            let expected: usize = arr.shape.iter().product();
            if expected != arr.data.len() {
                return Err(Error::Checkpoint(format!(
                    "array {} has {} values for shape {:?}",
                    arr.name,
                    arr.data.len(),
                    arr.shape
                )));
            }
            out.extend_from_slice(&(arr.name.len() as u32).to_le_bytes());
            out.extend_from_slice(arr.name.as_bytes());
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut cur)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut cur, &mut meta)?;
        let metadata: Value = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut cur)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut cur, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut cur, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut cur, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if !cur.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cur.len())));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated container".into()))
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
