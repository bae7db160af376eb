//! Self-describing binary checkpoints.
//!
//! Layout (little-endian): magic `RPNCKPT1`, `u32` version, a `key=value`
//! text header, a manifest of `(name, dtype, shape, offset, byte length)`,
//! the raw row-major arrays, then an optional vocabulary table.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::binio::{ByteReader, ByteWriter, Eof};
use crate::data::Vocabulary;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

use super::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RPNCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint shapes do not match the model config: {}", names.join(", "))]
    ShapeMismatch { names: Vec<String> },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<Eof> for CheckpointError {
    fn from(_: Eof) -> Self {
        CheckpointError::Truncated
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Stored precision of a parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    pub vocabulary: Option<Vocabulary>,
    /// Free-form `key=value` entries stored alongside the model config echo.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            adam: None,
            vocabulary: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn encode(&self, dtype: Dtype) -> Vec<u8> {
        let cfg = &self.params.config;
        let mut header = BTreeMap::new();
        header.insert("num-items".to_string(), cfg.num_items.to_string());
        header.insert("emb-size".to_string(), cfg.emb_size.to_string());
        header.insert("hidden-size".to_string(), cfg.hidden_size.to_string());
        header.insert("attn-size".to_string(), cfg.attn_size.to_string());
        header.insert("ablation".to_string(), cfg.ablation.to_string());
        if let Some(v) = &self.vocabulary {
            header.insert("vocab-hash".to_string(), format!("{:016x}", v.fingerprint()));
        }
        if let Some(a) = &self.adam {
            header.insert("adam-step".to_string(), a.step.to_string());
        }
        for (k, v) in &self.meta {
            header.entry(k.clone()).or_insert_with(|| v.clone());
        }
        let header_text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut arrays: Vec<(String, Dtype, Vec<usize>, &[f64])> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), dtype, t.shape().to_vec(), t.data()))
            .collect();
        if let Some(a) = &self.adam {
            for (k, (name, t)) in self.params.named().into_iter().enumerate() {
                arrays.push((format!("adam.m.{name}"), Dtype::F64, t.shape().to_vec(), &a.m[k]));
                arrays.push((format!("adam.v.{name}"), Dtype::F64, t.shape().to_vec(), &a.v[k]));
            }
        }

        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(VERSION);
        w.str32(&header_text);
        w.u32(arrays.len() as u32);
        let mut offset = 0u64;
        for (name, dt, shape, data) in &arrays {
            w.str32(name);
            w.u8(dt.tag());
            w.u8(shape.len() as u8);
            shape.iter().for_each(|&d| w.u64(d as u64));
            let nbytes = (data.len() * dt.width()) as u64;
            w.u64(offset);
            w.u64(nbytes);
            offset += nbytes;
        }
        w.u64(offset);
        for (_, dt, _, data) in &arrays {
            for &x in data.iter() {
                match dt {
                    Dtype::F64 => w.bytes(&x.to_le_bytes()),
                    Dtype::F32 => w.bytes(&(x as f32).to_le_bytes()),
                }
            }
        }
        match &self.vocabulary {
            Some(v) => {
                w.u64(v.len() as u64);
                for (id, &f) in v.ids().iter().zip(v.frequencies()) {
                    w.str32(id);
                    w.u64(f);
                }
            }
            None => w.u64(0),
        }
        w.buf
    }

    /// Decodes a checkpoint using the model config echoed in its header.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        decode(bytes, None)
    }

    /// Decodes a checkpoint that must match `expected` shape for shape.
    pub fn decode_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        decode(bytes, Some(expected))
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        std::fs::write(path, self.encode(dtype))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        Self::decode_for(&std::fs::read(path)?, expected)
    }
}

struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn header_value<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = h.get(key).ok_or_else(|| CheckpointError::Missing(format!("header key {key}")))?;
    raw.parse()
        .map_err(|_| CheckpointError::Corrupt(format!("header `{key}={raw}`")))
}

fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_text = r.str32()?;
    let mut header = BTreeMap::new();
    for line in header_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("header line `{line}`")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let n = r.u32()? as usize;
    let mut manifest = BTreeMap::new();
    for _ in 0..n {
        let name = r.str32()?;
        let dtype = match r.u8()? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            t => return Err(CheckpointError::Corrupt(format!("dtype tag {t} on `{name}`"))),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let offset = r.u64()? as usize;
        let nbytes = r.u64()? as usize;
        if shape.iter().product::<usize>() * dtype.width() != nbytes {
            return Err(CheckpointError::Corrupt(format!("`{name}` byte length disagrees with its shape")));
        }
        manifest.insert(name, Entry { dtype, shape, offset, nbytes });
    }
    let data_len = r.u64()? as usize;
    let data = r.take(data_len)?;
    for (name, e) in &manifest {
        if e.offset.checked_add(e.nbytes).is_none_or(|end| end > data_len) {
            return Err(CheckpointError::Corrupt(format!("`{name}` points outside the data block")));
        }
    }
    let vocab_count = r.u64()? as usize;
    let vocabulary = if vocab_count > 0 {
        let mut v = Vocabulary::new();
        for _ in 0..vocab_count {
            let id = r.str32()?;
            let f = r.u64()?;
            let i = v.insert(&id);
            v.set_frequency(i, f);
        }
        Some(v)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.remaining())));
    }

    let stored = ModelConfig {
        num_items: header_value(&header, "num-items")?,
        emb_size: header_value(&header, "emb-size")?,
        hidden_size: header_value(&header, "hidden-size")?,
        attn_size: header_value(&header, "attn-size")?,
        ablation: header_value::<String>(&header, "ablation")?
            .parse()
            .map_err(|e| CheckpointError::Corrupt(format!("{e}")))?,
    };
    let config = match expected {
        Some(exp) => {
            let mismatched: Vec<String> = exp
                .parameter_shapes()
                .into_iter()
                .filter(|(name, shape)| manifest.get(*name).is_none_or(|e| &e.shape != shape))
                .map(|(name, _)| name.to_string())
                .collect();
            if !mismatched.is_empty() {
                return Err(CheckpointError::ShapeMismatch { names: mismatched });
            }
            exp.clone()
        }
        None => stored,
    };

    let read = |name: &str| -> Result<Vec<f64>> {
        let e = manifest.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        let raw = &data[e.offset..e.offset + e.nbytes];
        Ok(match e.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        })
    };

    let shapes = config.parameter_shapes();
    let mut tensors = BTreeMap::new();
    for (name, shape) in &shapes {
        let e = manifest.get(*name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if &e.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                names: vec![name.to_string()],
            });
        }
        let t = Tensor::param(shape, read(name)?).expect("shape checked");
        tensors.insert(*name, t);
    }
    let params = ModelParams::from_named(config, |name| tensors.remove(name).expect("every name loaded"));

    let adam = match header.get("adam-step") {
        Some(_) => {
            let step = header_value(&header, "adam-step")?;
            let mut m = Vec::with_capacity(shapes.len());
            let mut v = Vec::with_capacity(shapes.len());
            for (name, _) in &shapes {
                m.push(read(&format!("adam.m.{name}"))?);
                v.push(read(&format!("adam.v.{name}"))?);
            }
            Some(AdamState { step, m, v })
        }
        None => None,
    };

    if let Some(v) = &vocabulary {
        let expect = format!("{:016x}", v.fingerprint());
        if header.get("vocab-hash") != Some(&expect) {
            return Err(CheckpointError::Corrupt("vocabulary does not match its hash".into()));
        }
        if v.len() != params.config.num_items {
            return Err(CheckpointError::Corrupt(format!(
                "vocabulary has {} items, model has {}",
                v.len(),
                params.config.num_items
            )));
        }
    }

    let reserved = ["num-items", "emb-size", "hidden-size", "attn-size", "ablation", "vocab-hash", "adam-step"];
    let meta = header
        .into_iter()
        .filter(|(k, _)| !reserved.contains(&k.as_str()))
        .collect();
    Ok(Checkpoint {
        params,
        adam,
        vocabulary,
        meta,
    })
}
