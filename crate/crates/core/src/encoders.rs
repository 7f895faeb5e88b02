//! Input pipelines of the three towers: patch embedding with an `[IMG]`
//! token for vision, word/box embedding for OCR tokens, and token embedding
//! with a `[CLS]` token for captions.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::layers::transformer_stack;
use crate::model::Model;
use crate::numerics::{Tape, Tensor, Var};

/// One image as an `[H, W, C]` grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Tensor,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            pixels: Tensor::new(vec![height, width, channels], values)?,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// A recognized word and its normalized `[x1, y1, x2, y2]` box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub word: String,
    pub bbox: [f64; 4],
}

impl OcrToken {
    pub fn new(word: impl Into<String>, bbox: [f64; 4]) -> Self {
        Self {
            word: word.into(),
            bbox,
        }
    }

    /// Checks `0 ≤ x1 ≤ x2 ≤ 1` and `0 ≤ y1 ≤ y2 ≤ 1`.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(format!("coordinates {:?} outside [0, 1]", self.bbox));
        }
        if x2 < x1 {
            return Err(format!("x2 {x2} < x1 {x1}"));
        }
        if y2 < y1 {
            return Err(format!("y2 {y2} < y1 {y1}"));
        }
        if self.word.trim().is_empty() {
            return Err("empty word".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const IMG: &str = "[IMG]";
pub const FUS: &str = "[FUS]";
const RESERVED: [&str; 5] = [PAD, UNK, CLS, IMG, FUS];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word-to-index map with the reserved tokens at indices 0..5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by the distinct normalized words, sorted.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let distinct: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| tokenize(w.as_ref()))
            .collect();
        let all: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(distinct)
            .collect();
        Self::try_from(all).expect("reserved tokens cannot collide with tokenized words")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of a single (already tokenized) word, falling back to `[UNK]`.
    pub fn lookup(&self, word: &str) -> usize {
        self.get(&word.to_lowercase()).unwrap_or(self.unk())
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn cls(&self) -> usize {
        2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(words: Vec<String>) -> std::result::Result<Self, String> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(format!("vocabulary must start with {RESERVED:?}"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry `{w}`"));
            }
        }
        Ok(Self { words, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Cuts an image into `P×P` patches in row-major patch order; each patch is
/// flattened in `(row, col, channel)` order. Returns `[N_p, P·P·C]`.
pub fn patchify_pixels(image: &ImageRecord, patch: usize) -> Result<Tensor> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(config(format!(
            "image `{}` of size {h}x{w} is not divisible by patch size {patch}",
            image.id
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = image.pixels.values();
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                let y = pr * patch + dy;
                let start = (y * w + pc * patch) * c;
                out.extend_from_slice(&px[start..start + patch * c]);
            }
        }
    }
    Tensor::matrix(gh * gw, patch * patch * c, out)
}

/// Inverse of [`patchify_pixels`].
pub fn unpatchify_pixels(patches: &Tensor, height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor> {
    let gw = width / patch;
    let mut out = vec![0.0; height * width * channels];
    for p in 0..patches.rows() {
        let (pr, pc) = (p / gw, p % gw);
        let row = patches.row(p);
        for dy in 0..patch {
            let y = pr * patch + dy;
            let dst = (y * width + pc * patch) * channels;
            let src = dy * patch * channels;
            out[dst..dst + patch * channels].copy_from_slice(&row[src..src + patch * channels]);
        }
    }
    Tensor::new(vec![height, width, channels], out)
}

/// Patch embedding: `[IMG]; patches·W + b`, plus learned positions.
/// Returns `[N_p + 1, d]`.
pub fn patchify(tape: &mut Tape<'_>, model: &Model, image: &ImageRecord) -> Result<Var> {
    let cfg = &model.config;
    if image.height() != cfg.image_height
        || image.width() != cfg.image_width
        || image.channels() != cfg.channels
    {
        return Err(config(format!(
            "image `{}` is {}x{}x{}, model expects {}x{}x{}",
            image.id,
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_height,
            cfg.image_width,
            cfg.channels
        )));
    }
    let vp = &model.layout.vision;
    let patches = tape.constant(patchify_pixels(image, cfg.patch_size)?);
    let (w, b) = (tape.param(vp.patch_w), tape.param(vp.patch_b));
    let proj = tape.matmul(patches, w)?;
    let proj = tape.add_row(proj, b)?;
    let img = tape.param(vp.img_token);
    let img = tape.as_row(img)?;
    let seq = tape.concat_rows(&[img, proj])?;
    let pos = tape.param(vp.pos_emb);
    tape.add(seq, pos)
}

/// OCR token embedding: word + type + position embeddings, plus the linear
/// projection of the normalized box. Returns `[N_o, d]`.
///
/// Tokens beyond `max_ocr` are dropped with a warning.
pub fn scene_text_embed(tape: &mut Tape<'_>, model: &Model, ocr: &[OcrToken]) -> Result<Var> {
    if ocr.is_empty() {
        return Err(contract(
            "scene_text_embed needs at least one OCR token; use the image-only path",
        ));
    }
    let max = model.config.max_ocr;
    let ocr = if ocr.len() > max {
        log::warn!("truncating {} OCR tokens to {max}", ocr.len());
        &ocr[..max]
    } else {
        ocr
    };
    let n = ocr.len();
    let sp = &model.layout.scene_text;

    let indices: Vec<usize> = ocr.iter().map(|t| model.vocab.lookup(t.word.trim())).collect();
    let table = tape.param(sp.word_emb);
    let words = tape.gather_rows(table, &indices)?;
    let ty = tape.param(sp.type_emb);
    let s = tape.add_row(words, ty)?;
    let pos_table = tape.param(sp.pos_emb);
    let pos = tape.slice_rows(pos_table, 0, n)?;
    let s_init = tape.add(s, pos)?;

    let boxes = Tensor::matrix(n, 4, ocr.iter().flat_map(|t| t.bbox).collect())?;
    let boxes = tape.constant(boxes);
    let (bw, bb) = (tape.param(sp.bbox_w), tape.param(sp.bbox_b));
    let bbox = tape.matmul(boxes, bw)?;
    let bbox = tape.add_row(bbox, bb)?;
    tape.add(s_init, bbox)
}

/// Token indices for a caption: `[CLS]` followed by at most `max_text` words.
pub fn caption_indices(model: &Model, text: &str) -> Result<Vec<usize>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Contract(format!("caption `{text}` has no tokens")));
    }
    let keep = tokens.len().min(model.config.max_text);
    Ok(std::iter::once(model.vocab.cls())
        .chain(tokens[..keep].iter().map(|w| model.vocab.lookup(w)))
        .collect())
}

/// Text tower: embeds a caption and returns the unit-norm `[1, D_e]`
/// projection of the final `[CLS]` state.
pub fn text_encode(tape: &mut Tape<'_>, model: &Model, text: &str) -> Result<Var> {
    model.counters.text();
    let indices = caption_indices(model, text)?;
    let tp = &model.layout.text;
    let table = tape.param(tp.word_emb);
    let tokens = tape.gather_rows(table, &indices)?;
    let pos_table = tape.param(tp.pos_emb);
    let pos = tape.slice_rows(pos_table, 0, indices.len())?;
    let x = tape.add(tokens, pos)?;
    let x = transformer_stack(tape, x, &tp.layers)?;
    let cls = tape.slice_rows(x, 0, 1)?;
    let head = tape.param(model.layout.heads.text);
    let t = tape.matmul(cls, head)?;
    tape.normalize_rows(t)
}

/// The vision layers that precede aggregation.
pub fn vision_backbone(tape: &mut Tape<'_>, model: &Model, patch_seq: Var) -> Result<Var> {
    transformer_stack(tape, patch_seq, model.plain_vision_layers())
}

/// The scene-text layers that precede aggregation.
pub fn scene_text_backbone(tape: &mut Tape<'_>, model: &Model, tokens: Var) -> Result<Var> {
    transformer_stack(tape, tokens, model.plain_scene_text_layers())
}
