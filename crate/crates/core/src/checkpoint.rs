//! Flat binary checkpoints.
//!
//! Layout, little endian throughout:
//! `b"VISTACKP"`, `u32` version, `u64` metadata length, metadata JSON,
//! `u64` section count, then per section: `u64` name length, name,
//! `u64` rank, `rank × u64` dims, `f64` values. Parameters live in
//! `param/<name>` sections and Adam moments in `adam.m/<name>` and
//! `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::objective::{Adam, AdamConfig};

const MAGIC: &[u8; 8] = b"VISTACKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub adam: Option<AdamConfig>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub corpus_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub meta: CheckpointMeta,
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_section(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    put_u64(buf, shape.len() as u64);
    for &d in shape {
        put_u64(buf, d as u64);
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model, and optionally its optimizer state, to bytes.
pub fn to_bytes(model: &Model, optimizer: Option<&Adam>, config_hash: Option<&str>, corpus_hash: Option<&str>) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        step: optimizer.map_or(0, |o| o.step),
        adam: optimizer.map(|o| o.config),
        config_hash: config_hash.map(str::to_string),
        corpus_hash: corpus_hash.map(str::to_string),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut buf, meta.len() as u64);
    buf.extend_from_slice(&meta);

    let n = model.params.len() as u64;
    put_u64(&mut buf, if optimizer.is_some() { 3 * n } else { n });
    for (_, name, t) in model.params.iter() {
        put_section(&mut buf, &format!("param/{name}"), t.shape(), t.values());
    }
    if let Some(opt) = optimizer {
        for (moments, prefix) in [(&opt.m, "adam.m"), (&opt.v, "adam.v")] {
            for ((_, name, t), m) in model.params.iter().zip(moments) {
                put_section(&mut buf, &format!("{prefix}/{name}"), t.shape(), m);
            }
        }
    }
    buf
}

pub fn save(path: &Path, model: &Model, optimizer: Option<&Adam>, config_hash: Option<&str>, corpus_hash: Option<&str>) -> Result<()> {
    fs::write(path, to_bytes(model, optimizer, config_hash, corpus_hash))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {x}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

    let mut model = Model::new(meta.config.clone(), meta.vocab.clone(), 0)?;
    let n_params = model.params.len();
    let mut m = vec![None; n_params];
    let mut v = vec![None; n_params];
    let mut seen = vec![false; n_params];

    let sections = r.len()?;
    for _ in 0..sections {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let values: Vec<f64> = r
            .take(count.checked_mul(8).ok_or_else(|| Error::Format("section too large".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let (prefix, pname) = name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("section `{name}` has no prefix")))?;
        let id = model
            .params
            .id(pname)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{pname}`")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "checkpoint section",
                lhs: model.params.get(id).shape().to_vec(),
                rhs: shape,
            });
        }
        match prefix {
            "param" => {
                *model.params.get_mut(id) = Tensor::new(shape, values)?;
                seen[id.0] = true;
            }
            "adam.m" => m[id.0] = Some(values),
            "adam.v" => v[id.0] = Some(values),
            _ => return Err(Error::Format(format!("unknown section kind `{prefix}`"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last section".into()));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing parameter `{}`", model.params.name(crate::numerics::ParamId(i)))));
    }
    let optimizer = match meta.adam {
        Some(config) => {
            let m: Option<Vec<_>> = m.into_iter().collect();
            let v: Option<Vec<_>> = v.into_iter().collect();
            match (m, v) {
                (Some(m), Some(v)) => Some(Adam {
                    config,
                    step: meta.step,
                    m,
                    v,
                }),
                _ => return Err(Error::Format("optimizer state incomplete".into())),
            }
        }
        None => None,
    };
    Ok(Checkpoint { model, optimizer, meta })
}
