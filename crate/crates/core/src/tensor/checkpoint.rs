//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u64 header_len | header JSON (header_len bytes)
//! per tensor, in header order: u64 value_count | value_count × f64
//! ```
//!
//! The header is `{"format":"relgate-tensors","version":1,"tensors":[{"name","shape"}]}`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

const FORMAT: &str = "relgate-tensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: Vec<CheckpointEntry>,
}

pub fn write_checkpoint<'a, W: Write>(
    mut out: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let header = Header {
        format: FORMAT.to_string(),
        version: 1,
        tensors: tensors
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in &tensors {
        out.write_all(&(t.len() as u64).to_le_bytes())?;
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let header_len = read_u64(&mut input)? as usize;
    if header_len > 1 << 30 {
        return Err(TensorError::Checkpoint("header too large".into()));
    }
    let mut json = vec![0u8; header_len];
    input.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n = read_u64(&mut input)? as usize;
        let expected: usize = entry.shape.iter().product();
        if n != expected {
            return Err(TensorError::Checkpoint(format!(
                "{}: {n} values for shape {:?}",
                entry.name, entry.shape
            )));
        }
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}
