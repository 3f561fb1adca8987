//! Binary parameter file.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! "FXPR" version blob_count
//! blob*: name_len name(utf-8) dtype(u8, 0 = f32) rank dims[rank] data
//! crc32 of every preceding byte
//! ```
//!
//! Blobs are named `<layer>.weight` and `<layer>.bias`.

use std::path::Path;

use fxpnet_core::net::{LayerParams, ParamSet};
use fxpnet_core::{Model, Tensor};

use super::write_bytes;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FXPR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn blobs_of(model: &Model) -> Vec<Blob> {
    let mut out = Vec::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        if let Some(p) = model.params().layer(idx) {
            for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                out.push(Blob {
                    name: format!("{}.{suffix}", layer.name),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
            }
        }
    }
    out
}

pub fn encode_blobs(blobs: &[Blob]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for d in &b.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_params(model: &Model) -> Vec<u8> {
    encode_blobs(&blobs_of(model))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Truncated(what.into())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a parameter file. Structural problems are reported before the
/// checksum is compared, so a short file yields [`Error::Truncated`].
pub fn decode_params(bytes: &[u8]) -> Result<Vec<Blob>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(Error::ParamMagic);
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Version {
            format: "parameter file",
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("header")?;
    let mut blobs = Vec::new();
    for i in 0..count {
        let what = format!("blob {i}");
        let name_len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::ParamMismatch(format!("blob {i} name is not utf-8")))?
            .to_string();
        let what = format!("blob `{name}`");
        let dtype = r.take(1, &what)?[0];
        let rank = r.u32(&what)?;
        if dtype != DTYPE_F32 || rank > MAX_RANK {
            verify_crc(bytes)?;
            return Err(Error::ParamMismatch(format!("{what}: dtype {dtype}, rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated(what.clone()))?;
        let raw = r.take(len, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push(Blob { name, shape, data });
    }
    let body = r.at;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if r.at != bytes.len() {
        return Err(Error::ParamMismatch(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(blobs)
}

fn verify_crc(bytes: &[u8]) -> Result<()> {
    if bytes.len() >= 4 {
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
    }
    Ok(())
}

/// Matches blobs to the layers of `model` by name and shape.
pub fn params_from_blobs(model: &Model, blobs: Vec<Blob>) -> Result<ParamSet> {
    let mut by_name: std::collections::BTreeMap<String, Blob> = std::collections::BTreeMap::new();
    for b in blobs {
        let name = b.name.clone();
        if by_name.insert(name.clone(), b).is_some() {
            return Err(Error::ParamMismatch(format!("blob `{name}` appears twice")));
        }
    }
    let mut layers = Vec::with_capacity(model.layers().len());
    for (idx, layer) in model.layers().iter().enumerate() {
        let Some(expected) = model.params().layer(idx) else {
            layers.push(None);
            continue;
        };
        let mut take = |suffix: &str, want: &Tensor| -> Result<Tensor> {
            let key = format!("{}.{suffix}", layer.name);
            let b = by_name
                .remove(&key)
                .ok_or_else(|| Error::ParamMismatch(format!("missing blob `{key}`")))?;
            if b.shape != want.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{key}` has shape {:?}, the network needs {:?}",
                    b.shape,
                    want.shape()
                )));
            }
            Ok(Tensor::new(b.shape, b.data)?)
        };
        let weight = take("weight", &expected.weight)?;
        let bias = take("bias", &expected.bias)?;
        layers.push(Some(LayerParams { weight, bias }));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::ParamMismatch(format!("blob `{extra}` matches no layer")));
    }
    Ok(ParamSet::new(layers))
}

pub fn save_params(model: &Model, path: &Path) -> Result<()> {
    write_bytes(path, encode_params(model))
}

/// Loads parameters from `path` into `model`.
pub fn load_params(model: &mut Model, path: &Path) -> Result<()> {
    let bytes = crate::dataio::read_file(path)?;
    let params = params_from_blobs(model, decode_params(&bytes)?)?;
    model.set_params(params)?;
    Ok(())
}
