//! Binary supernet checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "FEDSUPCK"
//! version u32      1
//! hlen    u32      length of the JSON header
//! header  hlen     {"space": ArchSpace, "norm": "pn"|"sbn", "shapes": [[..], ..]}
//! count   u64      number of f32 values
//! payload count*4  f32 values of every tensor in traversal order
//! ```
//!
//! Traversal order is the parameter order of the biggest child: stem, then
//! every layer slot of every stage (depthwise weight, α, γ, β, pointwise
//! weight, α, γ, β), then head weight and head bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpace;
use crate::error::{Error, Result};
use crate::norm::NormKind;
use crate::supernet::Supernet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FEDSUPCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    space: ArchSpace,
    norm: NormKind,
    shapes: Vec<Vec<usize>>,
}

pub fn to_bytes(net: &Supernet) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        space: net.space.clone(),
        norm: net.norm,
        shapes: net.params.iter().map(|p| p.shape().to_vec()).collect(),
    })?;
    let count: usize = net.num_params();
    let mut out = Vec::with_capacity(24 + header.len() + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in &net.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Supernet> {
    let b = &mut bytes;
    if take(b, 8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(b, hlen)?)?;
    let count = u64::from_le_bytes(take(b, 8)?.try_into().expect("8 bytes")) as usize;
    let payload = take(b, count.checked_mul(4).ok_or_else(|| Error::Checkpoint("count overflow".into()))?)?;
    if !b.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", b.len())));
    }
    let expected = Supernet::<f32>::build_shapes(&header.space, header.norm)?;
    if expected != header.shapes {
        return Err(Error::Checkpoint("tensor shapes do not match the stored space".into()));
    }
    if count != expected.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() {
        return Err(Error::Checkpoint("value count does not match the tensor shapes".into()));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let params = expected
        .iter()
        .map(|s| Tensor::new(s.clone(), values.by_ref().take(s.iter().product()).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Supernet { space: header.space, norm: header.norm, params })
}

pub fn write(path: &Path, net: &Supernet) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Supernet> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| Error::Format { path: path.to_owned(), reason: e.to_string() })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the serialized checkpoint.
pub fn hash(net: &Supernet) -> Result<String> {
    Ok(sha256_hex(&to_bytes(net)?))
}
