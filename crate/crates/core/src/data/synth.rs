use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{CaptionRecord, ImageRecord, OcrToken};
use crate::error::{config, Result};

use super::CorpusItem;

/// Recipe for a synthetic corpus. The same spec always yields the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_items: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Size of the synthetic word pool, category words included.
    pub vocab_size: usize,
    pub n_categories: usize,
    /// Inclusive word-count range of a caption, category word included.
    pub caption_len: [usize; 2],
    pub captions_per_item: usize,
    pub ocr_probability: f64,
    /// Inclusive OCR token-count range for items that carry OCR.
    pub ocr_tokens: [usize; 2],
    /// Probability that an OCR word is taken from the item's caption.
    pub relevance: f64,
    /// Paint a hashed pixel signature of every OCR word into its box.
    pub paint_ocr: bool,
    /// Items `2k` and `2k+1` share their pixels.
    pub pair_duplicates: bool,
    /// Give every item content words no other item uses.
    pub unique_words: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::mixed()
    }
}

impl CorpusSpec {
    /// General-purpose corpus: half the items carry OCR, painted in.
    pub fn mixed() -> Self {
        Self {
            n_items: 64,
            height: 8,
            width: 8,
            channels: 3,
            vocab_size: 200,
            n_categories: 8,
            caption_len: [3, 6],
            captions_per_item: 2,
            ocr_probability: 0.5,
            ocr_tokens: [1, 3],
            relevance: 0.7,
            paint_ocr: true,
            pair_duplicates: false,
            unique_words: false,
            seed: 7,
        }
    }

    /// Pairs of pixel-identical images told apart only by their OCR words,
    /// which also appear in the captions.
    pub fn discrimination() -> Self {
        Self {
            n_items: 32,
            vocab_size: 200,
            caption_len: [3, 3],
            captions_per_item: 1,
            ocr_probability: 1.0,
            ocr_tokens: [2, 2],
            relevance: 1.0,
            paint_ocr: false,
            pair_duplicates: true,
            unique_words: true,
            seed: 11,
            ..Self::mixed()
        }
    }

    /// Eight items, one per category.
    pub fn overfit() -> Self {
        Self {
            n_items: 8,
            caption_len: [3, 5],
            captions_per_item: 1,
            ocr_tokens: [1, 2],
            seed: 3,
            ..Self::mixed()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mixed" => Some(Self::mixed()),
            "discrimination" => Some(Self::discrimination()),
            "overfit" => Some(Self::overfit()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["mixed", "discrimination", "overfit"];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("n_categories", self.n_categories),
            ("captions_per_item", self.captions_per_item),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        for (name, p) in [("ocr_probability", self.ocr_probability), ("relevance", self.relevance)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config(format!("{name} {p} outside [0, 1]")));
            }
        }
        let [lo, hi] = self.caption_len;
        if lo < 1 || lo > hi {
            return Err(config(format!("caption_len [{lo}, {hi}] must satisfy 1 <= min <= max")));
        }
        let [olo, ohi] = self.ocr_tokens;
        if olo < 1 || olo > ohi {
            return Err(config(format!("ocr_tokens [{olo}, {ohi}] must satisfy 1 <= min <= max")));
        }
        let content = self.vocab_size.saturating_sub(self.n_categories);
        let needed = if self.unique_words {
            self.n_items * (hi - 1).max(1)
        } else {
            hi.max(ohi) + 1
        };
        if content < needed {
            return Err(config(format!(
                "vocab_size {} leaves {content} content words, {needed} needed",
                self.vocab_size
            )));
        }
        if self.pair_duplicates && !self.n_items.is_multiple_of(2) {
            return Err(config("pair_duplicates needs an even n_items"));
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// The `i`-th pool word: three consonant-vowel syllables.
pub fn synth_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut rest = i;
    let mut out = String::with_capacity(6);
    for _ in 0..3 {
        let s = rest % n;
        rest /= n;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

struct Pattern {
    base: Vec<f64>,
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Pattern {
    fn new(seed: u64, category: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + category as u64);
        Self {
            base: (0..channels).map(|_| rng.random_range(0.2..0.8)).collect(),
            fx: rng.random_range(0..3) as f64,
            fy: rng.random_range(1..4) as f64,
            phase: rng.random_range(0.0..TAU),
        }
    }

    fn render(&self, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = self.base.len();
        let noise = Normal::new(0.0, 0.03).expect("positive std");
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let wave = (TAU * (self.fx * x as f64 / w as f64 + self.fy * y as f64 / h as f64) + self.phase).sin();
                for (ch, base) in self.base.iter().enumerate() {
                    let v = base + 0.3 * wave * if ch % 2 == 0 { 1.0 } else { -1.0 } + noise.sample(rng);
                    out.push(v.clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

fn paint(pixels: &mut [f64], h: usize, w: usize, c: usize, tok: &OcrToken) {
    let digest = Sha256::digest(tok.word.as_bytes());
    let [x1, y1, x2, y2] = tok.bbox;
    let span = |a: f64, b: f64, n: usize| {
        let lo = ((a * n as f64).floor() as usize).min(n - 1);
        let hi = ((b * n as f64).ceil() as usize).clamp(lo + 1, n);
        lo..hi
    };
    for y in span(y1, y2, h) {
        for x in span(x1, x2, w) {
            for ch in 0..c {
                let k = ((y * w + x) * c + ch) % digest.len();
                pixels[(y * w + x) * c + ch] = digest[k] as f64 / 255.0;
            }
        }
    }
}

fn random_bbox(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let bw = rng.random_range(0.1..0.4);
    let bh = rng.random_range(0.1..0.3);
    let x1 = rng.random_range(0.0..1.0 - bw);
    let y1 = rng.random_range(0.0..1.0 - bh);
    [x1, y1, x1 + bw, y1 + bh]
}

/// Builds the corpus described by `spec`. Item `i` belongs to category
/// `i mod n_categories` (pair `k` to `k mod n_categories` with duplicates).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<Pattern> = (0..spec.n_categories)
        .map(|k| Pattern::new(spec.seed, k, c))
        .collect();
    let categories: Vec<String> = (0..spec.n_categories).map(synth_word).collect();
    let mut content: Vec<String> = (spec.n_categories..spec.vocab_size).map(synth_word).collect();
    if spec.unique_words {
        content.shuffle(&mut rng);
    }
    let per_item = spec.caption_len[1] - 1;

    let mut items: Vec<CorpusItem> = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let id = format!("item{i:05}");
        let group = if spec.pair_duplicates { i / 2 } else { i };
        let category = group % spec.n_categories;

        let mut pixels = if spec.pair_duplicates && i % 2 == 1 {
            items[i - 1].image.pixels.values().to_vec()
        } else {
            patterns[category].render(h, w, &mut rng)
        };

        let own: Vec<&String> = if spec.unique_words {
            content[i * per_item..(i + 1) * per_item].iter().collect()
        } else {
            Vec::new()
        };
        let mut captions = Vec::with_capacity(spec.captions_per_item);
        let mut caption_words: Vec<Vec<&String>> = Vec::new();
        for _ in 0..spec.captions_per_item {
            let len = rng.random_range(spec.caption_len[0]..=spec.caption_len[1]);
            let words: Vec<&String> = if spec.unique_words {
                let mut ws = own.clone();
                ws.shuffle(&mut rng);
                ws.truncate(len - 1);
                ws
            } else {
                content.choose_multiple(&mut rng, len - 1).collect()
            };
            let text = std::iter::once(categories[category].as_str())
                .chain(words.iter().map(|s| s.as_str()))
                .collect::<Vec<_>>()
                .join(" ");
            captions.push(CaptionRecord {
                image_id: id.clone(),
                text,
            });
            caption_words.push(words);
        }

        let mut ocr = Vec::new();
        if rng.random_bool(spec.ocr_probability) {
            let n = rng.random_range(spec.ocr_tokens[0]..=spec.ocr_tokens[1]);
            let in_caption: BTreeSet<&str> = captions
                .iter()
                .flat_map(|c| c.text.split(' '))
                .collect();
            // relevant words come from the caption content, not the category
            let mut relevant: Vec<&String> = caption_words.iter().flatten().copied().collect();
            relevant.sort();
            relevant.dedup();
            relevant.shuffle(&mut rng);
            let mut next_relevant = 0;
            for _ in 0..n {
                let word = if rng.random_bool(spec.relevance) && !relevant.is_empty() {
                    let wd = relevant[next_relevant % relevant.len()];
                    next_relevant += 1;
                    wd.clone()
                } else {
                    loop {
                        let wd = content.choose(&mut rng).expect("non-empty pool");
                        if !in_caption.contains(wd.as_str()) {
                            break wd.clone();
                        }
                    }
                };
                ocr.push(OcrToken::new(word, random_bbox(&mut rng)));
            }
        }
        if spec.paint_ocr {
            for tok in &ocr {
                paint(&mut pixels, h, w, c, tok);
            }
        }

        items.push(CorpusItem {
            image: ImageRecord::new(id, h, w, c, pixels)?,
            ocr,
            captions,
        });
    }
    Ok(items)
}
