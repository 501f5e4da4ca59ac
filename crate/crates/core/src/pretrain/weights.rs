//! Portable weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MP3DW"  version:u32  count:u32
//! count × { name_len:u16  name:utf8  rank:u8  extents:u32×rank  data:f32×∏extents }
//! ```
//!
//! Model metadata travels as ordinary one-element entries under the
//! reserved `__meta__/` prefix.

use std::path::Path;

use indexmap::IndexMap;

use crate::backbone::{BackboneConfig, PoolingPolicy, Variant};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MP3DW";
pub const VERSION: u32 = 1;
pub const META_PREFIX: &str = "__meta__/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreMeta {
    pub pooling_policy: PoolingPolicy,
    pub training_slices: usize,
    pub variant: Variant,
}

impl StoreMeta {
    pub fn from_config(c: &BackboneConfig) -> Self {
        Self { pooling_policy: c.pooling_policy, training_slices: c.input_slices, variant: c.variant }
    }
}

/// Ordered name → tensor map with optional model metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    pub tensors: IndexMap<String, Tensor>,
    pub meta: Option<StoreMeta>,
}

impl WeightStore {
    pub fn from_model(model: &ModelGraph) -> Self {
        Self {
            tensors: model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            meta: Some(StoreMeta::from_config(&model.arch.backbone().config)),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Only the entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            meta: self.meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta.map(|m| {
            let policy = match m.pooling_policy {
                PoolingPolicy::Anisotropic => 0.0,
                PoolingPolicy::Isotropic => 1.0,
            };
            let variant = match m.variant {
                Variant::Mp3d63 => 0.0,
                Variant::Mr3d50 => 1.0,
            };
            [("pooling_policy", policy), ("training_slices", m.training_slices as f32), ("variant", variant)]
        });
        let meta_entries: Vec<(String, Tensor)> = meta
            .into_iter()
            .flatten()
            .map(|(k, v)| (format!("{META_PREFIX}{k}"), Tensor::scalar(v)))
            .collect();
        let entries = self.tensors.iter().map(|(k, v)| (k, v)).chain(meta_entries.iter().map(|(k, v)| (k, v)));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&((self.tensors.len() + meta_entries.len()) as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Format("not a weight file (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = IndexMap::new();
        let mut meta = IndexMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
            let slot = match name.strip_prefix(META_PREFIX) {
                Some(key) => meta.insert(key.to_string(), t),
                None => tensors.insert(name.clone(), t),
            };
            if slot.is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, meta: parse_meta(&meta)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn parse_meta(meta: &IndexMap<String, Tensor>) -> Result<Option<StoreMeta>> {
    if meta.is_empty() {
        return Ok(None);
    }
    let get = |k: &str| -> Result<f32> {
        meta.get(k)
            .map(|t| t.data()[0])
            .ok_or_else(|| Error::Format(format!("metadata entry `{k}` missing")))
    };
    let pooling_policy = match get("pooling_policy")? as u32 {
        0 => PoolingPolicy::Anisotropic,
        1 => PoolingPolicy::Isotropic,
        v => return Err(Error::Format(format!("unknown pooling policy code {v}"))),
    };
    let variant = match get("variant")? as u32 {
        0 => Variant::Mp3d63,
        1 => Variant::Mr3d50,
        v => return Err(Error::Format(format!("unknown variant code {v}"))),
    };
    Ok(Some(StoreMeta { pooling_policy, training_slices: get("training_slices")? as usize, variant }))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Name-level outcome of a load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// In the model but not in the store; these keep their current values.
    pub missing: Vec<String>,
    /// In the store but not in the model.
    pub unexpected: Vec<String>,
}

/// Copies matching entries into `model`. Any shape mismatch is an error;
/// with `strict`, so is any missing or unexpected name. Nothing is written
/// unless the whole load succeeds.
pub fn load_weights(model: &mut ModelGraph, store: &WeightStore, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (name, current) in model.params.iter() {
        match store.tensors.get(name) {
            Some(t) if t.shape() != current.shape() => {
                return Err(Error::ParamShape { name: name.clone(), expected: current.shape().to_vec(), found: t.shape().to_vec() })
            }
            Some(_) => report.matched.push(name.clone()),
            None => report.missing.push(name.clone()),
        }
    }
    report.unexpected = store.tensors.keys().filter(|k| !model.params.contains(k)).cloned().collect();
    if strict && (!report.missing.is_empty() || !report.unexpected.is_empty()) {
        let first = report.missing.first().or(report.unexpected.first()).cloned().unwrap_or_default();
        return Err(Error::StrictLoad { missing: report.missing.len(), unexpected: report.unexpected.len(), first });
    }
    for name in &report.matched {
        model.params.set(name, store.tensors[name].clone())?;
    }
    Ok(report)
}
