//! Offline gallery embedding, similarity ranking, and Recall@K.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::Strategy;
use crate::data::CorpusItem;
use crate::error::{contract, Error, Result};
use crate::model::Model;
use crate::numerics::{kernels, Tensor};
use crate::parallel;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Image,
    /// Fusion embeddings, possibly mixed with image embeddings for items
    /// without OCR.
    Fusion,
    Text,
}

impl EmbeddingKind {
    fn code(self) -> u64 {
        match self {
            EmbeddingKind::Image => 0,
            EmbeddingKind::Fusion => 1,
            EmbeddingKind::Text => 2,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(EmbeddingKind::Image),
            1 => Ok(EmbeddingKind::Fusion),
            2 => Ok(EmbeddingKind::Text),
            _ => Err(Error::Format(format!("unknown embedding kind code {code}"))),
        }
    }
}

/// Row-aligned ids and unit-norm vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Tensor,
    pub kind: EmbeddingKind,
}

const UNIT_NORM_TOL: f64 = 1e-9;

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, vectors: Tensor, kind: EmbeddingKind) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(contract(format!(
                "{} ids for vectors of shape {:?}",
                ids.len(),
                vectors.shape()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(contract(format!("duplicate embedding id `{dup}`")));
        }
        for i in 0..vectors.rows() {
            let norm = kernels::dot(vectors.row(i), vectors.row(i)).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(contract(format!("row `{}` has norm {norm}", ids[i])));
            }
        }
        Ok(Self { ids, vectors, kind })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>, kind: EmbeddingKind, dim: usize) -> Result<Self> {
        let n = rows.len();
        let values = rows.into_iter().flatten().collect();
        Self::new(ids, Tensor::matrix(n, dim, values)?, kind)
    }
}

/// `S[i, j] = q_i · g_j`.
pub fn similarity_matrix(q: &EmbeddingSet, g: &EmbeddingSet) -> Result<Tensor> {
    similarity_matrix_with(q, g, cfg!(feature = "parallel"))
}

/// As [`similarity_matrix`], choosing the row-parallel path at runtime.
pub fn similarity_matrix_with(q: &EmbeddingSet, g: &EmbeddingSet, parallel: bool) -> Result<Tensor> {
    if q.dim() != g.dim() {
        return Err(Error::Shape {
            op: "similarity_matrix",
            lhs: q.vectors.shape().to_vec(),
            rhs: g.vectors.shape().to_vec(),
        });
    }
    let rows: Vec<usize> = (0..q.len()).collect();
    let out = parallel::map_with(&rows, parallel, |&i| {
        (0..g.len())
            .map(|j| kernels::dot(q.vectors.row(i), g.vectors.row(j)))
            .collect::<Vec<f64>>()
    });
    Tensor::matrix(q.len(), g.len(), out.into_iter().flatten().collect())
}

/// 1-based rank of gallery item `j` in a score row, ties going to the lower
/// index.
pub fn rank_in_row(row: &[f64], j: usize) -> usize {
    let s = row[j];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(k, &x)| x > s || (x == s && k < j))
        .count()
}

/// Best rank among a query's relevant gallery items.
pub fn best_rank(row: &[f64], relevant: &[usize]) -> Result<usize> {
    if relevant.is_empty() {
        return Err(contract("query has no relevant gallery item"));
    }
    if let Some(&bad) = relevant.iter().find(|&&j| j >= row.len()) {
        return Err(contract(format!("relevant index {bad} outside gallery of {}", row.len())));
    }
    Ok(relevant.iter().map(|&j| rank_in_row(row, j)).min().expect("non-empty"))
}

fn best_ranks(s: &Tensor, relevant: &[Vec<usize>]) -> Result<Vec<usize>> {
    if s.shape().len() != 2 || s.rows() != relevant.len() {
        return Err(contract(format!(
            "{} relevance lists for a {:?} similarity matrix",
            relevant.len(),
            s.shape()
        )));
    }
    (0..s.rows()).map(|i| best_rank(s.row(i), &relevant[i])).collect()
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn recall_at_k(s: &Tensor, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    let ranks = best_ranks(s, relevant)?;
    if ranks.is_empty() {
        return Err(contract("no queries"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub queries: usize,
}

impl DirectionReport {
    pub fn from_similarity(s: &Tensor, relevant: &[Vec<usize>]) -> Result<Self> {
        let mut ranks = best_ranks(s, relevant)?;
        if ranks.is_empty() {
            return Err(contract("no queries"));
        }
        let n = ranks.len() as f64;
        let at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let (r1, r5, r10) = (at(1), at(5), at(10));
        ranks.sort_unstable();
        Ok(Self {
            r1,
            r5,
            r10,
            median_rank: median(&ranks),
            queries: ranks.len(),
        })
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Fusion embedding for items with OCR, image embedding otherwise.
    SceneTextAware,
    /// Image embedding for every item; the scene-text tower never runs.
    SceneTextFree,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::SceneTextAware => "scene_text_aware",
            EvalMode::SceneTextFree => "scene_text_free",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scene_text_aware" => Ok(EvalMode::SceneTextAware),
            "scene_text_free" => Ok(EvalMode::SceneTextFree),
            _ => Err(format!("unknown mode `{s}`; valid: scene_text_aware, scene_text_free")),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: EvalMode,
    pub strategy: Strategy,
    pub images: usize,
    pub captions: usize,
    pub image_to_text: DirectionReport,
    pub text_to_image: DirectionReport,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    direction: &'a str,
    mode: EvalMode,
    strategy: Strategy,
    #[serde(rename = "r@1")]
    r1: f64,
    #[serde(rename = "r@5")]
    r5: f64,
    #[serde(rename = "r@10")]
    r10: f64,
    median_rank: f64,
    queries: usize,
}

impl RetrievalReport {
    /// Similarity matrices and ground truth built from gallery and query sets.
    pub fn from_embeddings(
        gallery: &EmbeddingSet,
        queries: &EmbeddingSet,
        caption_owner: &[usize],
        mode: EvalMode,
        strategy: Strategy,
    ) -> Result<Self> {
        if caption_owner.len() != queries.len() {
            return Err(contract("one owner per caption is required"));
        }
        let t2i = similarity_matrix(queries, gallery)?;
        let i2t = t2i.transpose()?;
        let t2i_rel: Vec<Vec<usize>> = caption_owner.iter().map(|&o| vec![o]).collect();
        let mut i2t_rel = vec![Vec::new(); gallery.len()];
        for (c, &o) in caption_owner.iter().enumerate() {
            i2t_rel[o].push(c);
        }
        Ok(Self {
            mode,
            strategy,
            images: gallery.len(),
            captions: queries.len(),
            image_to_text: DirectionReport::from_similarity(&i2t, &i2t_rel)?,
            text_to_image: DirectionReport::from_similarity(&t2i, &t2i_rel)?,
        })
    }

    /// One JSON object per direction.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (direction, d) in [("image_to_text", &self.image_to_text), ("text_to_image", &self.text_to_image)] {
            let line = ReportLine {
                direction,
                mode: self.mode,
                strategy: self.strategy,
                r1: d.r1,
                r5: d.r5,
                r10: d.r10,
                median_rank: d.median_rank,
                queries: d.queries,
            };
            out.push_str(&serde_json::to_string(&line).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "mode={} strategy={} images={} captions={}\n",
            self.mode, self.strategy, self.images, self.captions
        );
        out.push_str("direction        R@1     R@5     R@10    medR\n");
        for (name, d) in [("image-to-text", &self.image_to_text), ("text-to-image", &self.text_to_image)] {
            out.push_str(&format!(
                "{name:<15} {:>6.3}  {:>6.3}  {:>6.3}  {:>5.1}\n",
                d.r1, d.r5, d.r10, d.median_rank
            ));
        }
        out
    }
}

/// Embeds every corpus image under `mode`. Items with OCR get their fusion
/// embedding in scene-text-aware mode unless the strategy yields none.
pub fn embed_gallery(model: &Model, corpus: &[CorpusItem], mode: EvalMode, strategy: Strategy) -> Result<EmbeddingSet> {
    embed_gallery_with(model, corpus, mode, strategy, cfg!(feature = "parallel"))
}

pub fn embed_gallery_with(
    model: &Model,
    corpus: &[CorpusItem],
    mode: EvalMode,
    strategy: Strategy,
    parallel: bool,
) -> Result<EmbeddingSet> {
    let rows = parallel::map_with(corpus, parallel, |item| -> Result<(Vec<f64>, bool)> {
        let ocr: &[_] = match mode {
            EvalMode::SceneTextAware => &item.ocr,
            EvalMode::SceneTextFree => &[],
        };
        let out = model.embed_image(&item.image, ocr, strategy)?;
        Ok(match out.f {
            Some(f) => (f, true),
            None => (out.v, false),
        })
    });
    let rows: Vec<(Vec<f64>, bool)> = rows.into_iter().collect::<Result<_>>()?;
    let kind = if rows.iter().any(|r| r.1) {
        EmbeddingKind::Fusion
    } else {
        EmbeddingKind::Image
    };
    let ids = corpus.iter().map(|it| it.id().to_string()).collect();
    EmbeddingSet::from_rows(ids, rows.into_iter().map(|r| r.0).collect(), kind, model.config.embed_dim)
}

/// Caption embeddings with ids `"{item}#{k}"`, and the owning item of each.
pub fn embed_captions(model: &Model, corpus: &[CorpusItem]) -> Result<(EmbeddingSet, Vec<usize>)> {
    embed_captions_with(model, corpus, cfg!(feature = "parallel"))
}

pub fn embed_captions_with(model: &Model, corpus: &[CorpusItem], parallel: bool) -> Result<(EmbeddingSet, Vec<usize>)> {
    let mut jobs = Vec::new();
    for (i, item) in corpus.iter().enumerate() {
        for (k, c) in item.captions.iter().enumerate() {
            jobs.push((i, format!("{}#{k}", item.id()), c.text.as_str()));
        }
    }
    let rows = parallel::map_with(&jobs, parallel, |(_, _, text)| model.embed_text(text));
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    let owners = jobs.iter().map(|j| j.0).collect();
    let ids = jobs.into_iter().map(|j| j.1).collect();
    Ok((
        EmbeddingSet::from_rows(ids, rows, EmbeddingKind::Text, model.config.embed_dim)?,
        owners,
    ))
}

/// Full retrieval evaluation of `model` on `corpus`.
pub fn evaluate(model: &Model, corpus: &[CorpusItem], mode: EvalMode, strategy: Strategy) -> Result<RetrievalReport> {
    if corpus.is_empty() {
        return Err(contract("cannot evaluate on an empty corpus"));
    }
    let gallery = embed_gallery(model, corpus, mode, strategy)?;
    let (queries, owners) = embed_captions(model, corpus)?;
    RetrievalReport::from_embeddings(&gallery, &queries, &owners, mode, strategy)
}

/// A precomputed image gallery; text queries only run the text tower.
#[derive(Debug, Clone)]
pub struct Gallery {
    pub images: EmbeddingSet,
}

impl Gallery {
    pub fn build(model: &Model, corpus: &[CorpusItem], mode: EvalMode, strategy: Strategy) -> Result<Self> {
        Ok(Self {
            images: embed_gallery(model, corpus, mode, strategy)?,
        })
    }

    /// Gallery indices ordered best-first, ties to the lower index.
    pub fn query(&self, model: &Model, text: &str) -> Result<Vec<usize>> {
        let t = model.embed_text(text)?;
        let scores: Vec<f64> = (0..self.images.len())
            .map(|j| kernels::dot(&t, self.images.vectors.row(j)))
            .collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(order)
    }
}

fn ids_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Writes `path` (u64 n, u64 dim, u64 kind, then f64 rows, all little
/// endian) and `path.ids` (one id per line).
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * set.vectors.numel());
    for h in [set.len() as u64, set.dim() as u64, set.kind.code()] {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for v in set.vectors.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    let mut ids = fs::File::create(ids_path(path))?;
    for id in &set.ids {
        writeln!(ids, "{id}")?;
    }
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path)?;
    if bytes.len() < 24 {
        return Err(Error::Format(format!("{}: header truncated", path.display())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
    let (n, dim, kind) = (word(0) as usize, word(1) as usize, EmbeddingKind::from_code(word(2))?);
    let body = &bytes[24..];
    if body.len() != 8 * n * dim {
        return Err(Error::Format(format!(
            "{}: {} body bytes for {n} x {dim} values",
            path.display(),
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let ids: Vec<String> = fs::read_to_string(ids_path(path))?.lines().map(str::to_string).collect();
    EmbeddingSet::new(ids, Tensor::matrix(n, dim, values)?, kind)
}
