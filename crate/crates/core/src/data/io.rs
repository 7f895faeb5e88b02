//! Line-delimited corpus files.
//!
//! Line 1 is `{"schema_version":1}`. Each further line is one item:
//! `{"id", "shape":[H,W,C], "pixels", "ocr":[{"word","bbox"}], "captions":[..]}`.
//! `pixels` is either base64 of little-endian f64 values in `(row, col,
//! channel)` order, or nested `[H][W][C]` arrays (then `shape` is optional).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoders::{CaptionRecord, ImageRecord, OcrToken};
use crate::error::{Error, Result};

use super::CorpusItem;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
}

#[derive(Serialize)]
struct ItemOut<'a> {
    id: &'a str,
    shape: &'a [usize],
    pixels: String,
    ocr: &'a [OcrToken],
    captions: Vec<&'a str>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemIn {
    id: String,
    #[serde(default)]
    shape: Option<Vec<usize>>,
    pixels: Value,
    #[serde(default)]
    ocr: Vec<OcrToken>,
    captions: Vec<String>,
}

fn encode_pixels(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

/// Serializes a corpus, header line included, with a trailing newline.
pub fn write_corpus_string(corpus: &[CorpusItem]) -> String {
    let mut out = serde_json::to_string(&Header {
        schema_version: SCHEMA_VERSION,
    })
    .expect("header serializes");
    out.push('\n');
    for item in corpus {
        let line = ItemOut {
            id: item.id(),
            shape: item.image.pixels.shape(),
            pixels: encode_pixels(item.image.pixels.values()),
            ocr: &item.ocr,
            captions: item.captions.iter().map(|c| c.text.as_str()).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("item serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, corpus: &[CorpusItem]) -> Result<()> {
    fs::write(path, write_corpus_string(corpus))?;
    Ok(())
}

/// Hex SHA-256 of the serialized corpus.
pub fn corpus_hash(corpus: &[CorpusItem]) -> String {
    hex::encode(Sha256::digest(write_corpus_string(corpus).as_bytes()))
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let text = fs::read_to_string(path)?;
    read_corpus_str(&text)
}

/// Parses and validates a corpus held in memory.
pub fn read_corpus_str(text: &str) -> Result<Vec<CorpusItem>> {
    let corpus = parse_corpus(text)?;
    let mut ids = HashSet::new();
    let first_shape = corpus.first().map(|it| it.image.pixels.shape().to_vec());
    for item in &corpus {
        item.validate()?;
        if !ids.insert(item.id().to_string()) {
            return Err(Error::Validation {
                item: item.id().to_string(),
                field: "id".into(),
                msg: "duplicate id".into(),
            });
        }
        if Some(item.image.pixels.shape()) != first_shape.as_deref() {
            return Err(Error::Validation {
                item: item.id().to_string(),
                field: "shape".into(),
                msg: format!("{:?} differs from the first item's {:?}", item.image.pixels.shape(), first_shape.as_deref().unwrap_or(&[])),
            });
        }
    }
    Ok(corpus)
}

/// Parses without the cross-item checks; line numbers are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusItem>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file; expected a schema_version header".into(),
    })?;
    let header: Header = serde_json::from_str(header.1).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported schema_version {}", header.schema_version),
        });
    }
    let mut items = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ItemIn = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        items.push(convert(raw, line_no)?);
    }
    Ok(items)
}

fn convert(raw: ItemIn, line: usize) -> Result<CorpusItem> {
    let invalid = |field: &str, msg: String| Error::Validation {
        item: raw.id.clone(),
        field: field.into(),
        msg: format!("{msg} (line {line})"),
    };
    let (shape, values) = match &raw.pixels {
        Value::String(s) => {
            let bytes = STANDARD.decode(s).map_err(|e| invalid("pixels", format!("bad base64: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(invalid("pixels", format!("{} bytes is not a whole number of f64", bytes.len())));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let shape = raw
                .shape
                .clone()
                .ok_or_else(|| invalid("shape", "required with base64 pixels".into()))?;
            (shape, values)
        }
        Value::Array(_) => {
            let mut shape = Vec::new();
            let mut values = Vec::new();
            flatten(&raw.pixels, 0, &mut shape, &mut values).map_err(|m| invalid("pixels", m))?;
            if let Some(given) = &raw.shape {
                if *given != shape {
                    return Err(invalid("shape", format!("{given:?} does not match nested pixels {shape:?}")));
                }
            }
            (shape, values)
        }
        _ => return Err(invalid("pixels", "expected a base64 string or nested arrays".into())),
    };
    if shape.len() != 3 {
        return Err(invalid("shape", format!("expected [H, W, C], got {shape:?}")));
    }
    if shape.iter().product::<usize>() != values.len() {
        return Err(invalid("pixels", format!("{} values do not fill shape {shape:?}", values.len())));
    }
    let image = ImageRecord::new(raw.id.clone(), shape[0], shape[1], shape[2], values)
        .map_err(|e| invalid("pixels", e.to_string()))?;
    let captions = raw
        .captions
        .into_iter()
        .map(|text| CaptionRecord {
            image_id: raw.id.clone(),
            text,
        })
        .collect();
    Ok(CorpusItem {
        image,
        ocr: raw.ocr,
        captions,
    })
}

/// Walks a rectangular nested array, recording the extent of each level.
fn flatten(v: &Value, depth: usize, shape: &mut Vec<usize>, out: &mut Vec<f64>) -> std::result::Result<(), String> {
    match v {
        Value::Array(xs) => {
            if shape.len() == depth {
                shape.push(xs.len());
            } else if shape.len() < depth || shape[depth] != xs.len() {
                return Err("ragged nested pixel arrays".into());
            }
            for x in xs {
                flatten(x, depth + 1, shape, out)?;
            }
            Ok(())
        }
        Value::Number(n) => {
            if shape.len() != depth {
                return Err("ragged nested pixel arrays".into());
            }
            out.push(n.as_f64().ok_or("pixel is not a number")?);
            Ok(())
        }
        _ => Err("pixel is not a number".into()),
    }
}
