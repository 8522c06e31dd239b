//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CRSCKPT1"
//! header     u32 length + UTF-8 JSON {"net": NetConfig, "step": u64, "has_ema": bool}
//! count      u32 number of tensors
//! tensor     u16 name length, name, u8 rank, rank × u32 dims, f32 data
//! ```
//!
//! Parameters are named `stage{s}/{layer}.{weight|bias}`; EMA shadows carry
//! an extra `ema/` prefix. Kernels have shape `[cout, cin, k, k, k]`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{CascadeModel, NetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CRSCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: CascadeModel<f32>,
    pub ema: Option<CascadeModel<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    step: u64,
    has_ema: bool,
}

fn named_shapes(m: &CascadeModel<f32>, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for (s, stage) in m.stages.iter().enumerate() {
        for c in &stage.convs {
            let base = format!("{prefix}stage{}/{}", s + 1, c.name);
            v.push((format!("{base}.weight"), vec![c.cout, c.cin, c.ks, c.ks, c.ks]));
            v.push((format!("{base}.bias"), vec![c.cout]));
        }
    }
    v
}

impl Checkpoint {
    /// Weights to predict with: the EMA shadow when present.
    pub fn inference_model(&self) -> &CascadeModel<f32> {
        self.ema.as_ref().unwrap_or(&self.model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            net: self.model.config,
            step: self.step,
            has_ema: self.ema.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut entries: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        let mut models = vec![(&self.model, "")];
        if let Some(ema) = &self.ema {
            models.push((ema, "ema/"));
        }
        for (m, prefix) in models {
            for ((name, shape), (_, data)) in named_shapes(m, prefix).into_iter().zip(m.tensors()) {
                entries.push((name, shape, data));
            }
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        let mut fill = |prefix: &str| -> Result<CascadeModel<f32>> {
            let mut m = CascadeModel::zeros(header.net)?;
            let names = named_shapes(&m, prefix);
            for ((name, shape), dst) in names.into_iter().zip(m.tensors_mut()) {
                let (s, data) = tensors
                    .remove(&name)
                    .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor {name}")))?;
                if s != shape {
                    return Err(Error::BadCheckpoint(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
                }
                dst.copy_from_slice(&data);
            }
            Ok(m)
        };
        let model = fill("")?;
        let ema = if header.has_ema { Some(fill("ema/")?) } else { None };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::BadCheckpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            step: header.step,
            model,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedFile {
            expected: self.pos + n,
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}
