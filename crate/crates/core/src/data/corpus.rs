use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{CaptionRecord, ImageRecord, OcrToken, Vocab};
use crate::error::{contract, Error, Result};
use crate::objective::TrainPair;

/// One image with its (possibly empty) OCR and at least one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub image: ImageRecord,
    pub ocr: Vec<OcrToken>,
    pub captions: Vec<CaptionRecord>,
}

impl CorpusItem {
    pub fn id(&self) -> &str {
        &self.image.id
    }

    pub fn has_ocr(&self) -> bool {
        !self.ocr.is_empty()
    }

    pub fn pair(&self, caption: usize) -> TrainPair<'_> {
        TrainPair {
            id: self.id(),
            image: &self.image,
            ocr: &self.ocr,
            caption: &self.captions[caption].text,
        }
    }

    /// Checks the item-level invariants, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: String, msg: String| Error::Validation {
            item: self.id().to_string(),
            field,
            msg,
        };
        if self.id().is_empty() {
            return Err(fail("id".into(), "empty id".into()));
        }
        if !self.image.pixels.is_finite() {
            return Err(fail("pixels".into(), "non-finite pixel value".into()));
        }
        if self.image.pixels.shape().contains(&0) {
            return Err(fail("pixels".into(), "empty image".into()));
        }
        for (i, tok) in self.ocr.iter().enumerate() {
            tok.validate().map_err(|m| fail(format!("ocr[{i}]"), m))?;
        }
        if self.captions.is_empty() {
            return Err(fail("captions".into(), "at least one caption is required".into()));
        }
        for (i, c) in self.captions.iter().enumerate() {
            if c.text.trim().is_empty() {
                return Err(fail(format!("captions[{i}]"), "empty caption".into()));
            }
            if c.image_id != self.image.id {
                return Err(fail(format!("captions[{i}]"), "caption belongs to another image".into()));
            }
        }
        Ok(())
    }
}

/// Vocabulary over every caption and OCR word of a corpus.
pub fn build_vocab(corpus: &[CorpusItem]) -> Vocab {
    let words = corpus.iter().flat_map(|item| {
        item.captions
            .iter()
            .map(|c| c.text.as_str())
            .chain(item.ocr.iter().map(|t| t.word.as_str()))
    });
    Vocab::from_words(words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub item: usize,
    pub caption: usize,
}

/// Shuffled batches for one epoch. The RNG stream is chosen by `epoch`, so
/// `(seed, epoch)` fixes the result. A trailing batch with fewer than two
/// entries is dropped.
pub fn make_batches(corpus: &[CorpusItem], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<BatchEntry>>> {
    if batch_size < 2 {
        return Err(contract("batch_size must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let entries: Vec<BatchEntry> = order
        .into_iter()
        .map(|item| BatchEntry {
            item,
            caption: rng.random_range(0..corpus[item].captions.len()),
        })
        .collect();
    Ok(entries
        .chunks(batch_size)
        .filter(|b| b.len() >= 2)
        .map(<[BatchEntry]>::to_vec)
        .collect())
}
