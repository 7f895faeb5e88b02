//! Run configuration and the train / eval / ablate pipelines behind the CLI.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::Strategy;
use crate::checkpoint::{self, Checkpoint};
use crate::data::{build_vocab, corpus_hash, load_corpus, make_batches, CorpusItem};
use crate::error::{config, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::ParamSet;
use crate::objective::{train_step, Adam, AdamConfig, LossParams, StepStats};
use crate::retrieval::{evaluate, EvalMode, RetrievalReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub mode: EvalMode,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossParams,
    pub optimizer: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            batch_size: 8,
            strategy: Strategy::FusionToken,
            mode: EvalMode::SceneTextAware,
            corpus: PathBuf::from("corpus.jsonl"),
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            loss: LossParams::default(),
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form with the paths blanked, so
    /// moving a run or its corpus does not change the hash. The corpus
    /// itself is identified by its own hash.
    pub fn hash(&self) -> String {
        let canonical = Self {
            corpus: PathBuf::new(),
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// Checks every field; `check_paths` also requires the corpus to exist.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(config("batch_size must be at least 2"));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return Err(config(format!("learning rate {} must be finite and non-negative", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(config("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if check_paths && !self.corpus.is_file() {
            return Err(config(format!("corpus `{}` does not exist", self.corpus.display())));
        }
        Ok(())
    }

    /// Fails with a validation error if an image does not fit the model.
    pub fn check_corpus(&self, corpus: &[CorpusItem]) -> Result<()> {
        if corpus.len() < 2 {
            return Err(config("training needs at least two corpus items"));
        }
        let m = &self.model;
        for item in corpus {
            let shape = item.image.pixels.shape();
            if shape != [m.image_height, m.image_width, m.channels] {
                return Err(Error::Validation {
                    item: item.id().to_string(),
                    field: "pixels".into(),
                    msg: format!(
                        "shape {shape:?} does not match the model's [{}, {}, {}]",
                        m.image_height, m.image_width, m.channels
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Batches are shuffled with a seed derived from, but not equal to, the
/// model-initialization seed.
fn batch_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone)]
pub struct BestState {
    pub step: u64,
    pub loss: f64,
    pub params: ParamSet,
}

pub struct Trainer<'c> {
    pub model: Model,
    pub optimizer: Adam,
    pub best: Option<BestState>,
    corpus: &'c [CorpusItem],
    cfg: RunConfig,
    cached_epoch: Option<(u64, Vec<Vec<crate::data::BatchEntry>>)>,
}

impl<'c> Trainer<'c> {
    /// Fresh model seeded from the config, vocabulary built from `corpus`.
    pub fn new(cfg: &RunConfig, corpus: &'c [CorpusItem]) -> Result<Self> {
        cfg.validate(false)?;
        cfg.check_corpus(corpus)?;
        let model = Model::new(cfg.model.clone(), build_vocab(corpus), cfg.seed)?;
        let optimizer = Adam::new(cfg.optimizer, &model.params);
        Ok(Self {
            model,
            optimizer,
            best: None,
            corpus,
            cfg: cfg.clone(),
            cached_epoch: None,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(cfg: &RunConfig, corpus: &'c [CorpusItem], ck: Checkpoint) -> Result<Self> {
        cfg.validate(false)?;
        cfg.check_corpus(corpus)?;
        if ck.model.config != cfg.model {
            return Err(config("checkpoint model config differs from the run config"));
        }
        let optimizer = ck
            .optimizer
            .ok_or_else(|| config("checkpoint has no optimizer state to resume from"))?;
        Ok(Self {
            model: ck.model,
            optimizer,
            best: None,
            corpus,
            cfg: cfg.clone(),
            cached_epoch: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    fn batches_per_epoch(&self) -> usize {
        self.corpus.len() / self.cfg.batch_size.min(self.corpus.len())
    }

    /// Runs one optimizer step on the next batch of the schedule.
    pub fn train_one(&mut self) -> Result<StepStats> {
        let per_epoch = self.batches_per_epoch() as u64;
        let step = self.optimizer.step;
        let (epoch, index) = (step / per_epoch, (step % per_epoch) as usize);
        if self.cached_epoch.as_ref().map(|c| c.0) != Some(epoch) {
            let batches = make_batches(self.corpus, self.cfg.batch_size, batch_seed(self.cfg.seed), epoch)?;
            self.cached_epoch = Some((epoch, batches));
        }
        let batch = &self.cached_epoch.as_ref().expect("just filled").1[index];
        let pairs: Vec<_> = batch.iter().map(|e| self.corpus[e.item].pair(e.caption)).collect();
        let before = self.model.params.clone();
        let stats = train_step(&mut self.model, &mut self.optimizer, &pairs, self.cfg.strategy, &self.cfg.loss)?;
        // the loss was computed with the pre-update parameters
        if self.best.as_ref().is_none_or(|b| stats.loss < b.loss) {
            self.best = Some(BestState {
                step,
                loss: stats.loss,
                params: before,
            });
        }
        Ok(stats)
    }

    /// Steps until the configured total, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &StepStats) -> Result<()>) -> Result<()> {
        while self.optimizer.step < self.cfg.steps {
            let step = self.optimizer.step;
            let stats = self.train_one()?;
            on_step(step, &stats)?;
        }
        Ok(())
    }

    /// The best model seen so far, or the current one before any step.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.params = b.params.clone();
        }
        m
    }
}

#[derive(Debug, Serialize)]
struct MetricsLine {
    step: u64,
    loss: f64,
    itc: f64,
    ftc: Option<f64>,
    alpha: f64,
    sigma: f64,
    fusion_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub corpus_hash: String,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub best_loss: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";
pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const SUMMARY_FILE: &str = "run.json";

/// Trains per `cfg`, writing the effective config, a per-step metrics log,
/// final and best checkpoints, and a summary into `out_dir`. The log is
/// flushed line by line so a diverged run keeps its history.
pub fn train_run(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    cfg.validate(true)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let config_hash = cfg.hash();
    let corpus_hash = corpus_hash(&corpus);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG), cfg.to_toml())?;

    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, &corpus, checkpoint::load(path)?)?,
        None => Trainer::new(cfg, &corpus)?,
    };
    let log_file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(out_dir.join(METRICS_FILE))?
    } else {
        File::create(out_dir.join(METRICS_FILE))?
    };
    let mut log = BufWriter::new(log_file);
    let mut final_loss = None;
    let alpha = cfg.loss.alpha;
    trainer.run(|step, s| {
        let line = MetricsLine {
            step,
            loss: s.loss,
            itc: s.itc,
            ftc: s.ftc,
            alpha,
            sigma: s.sigma,
            fusion_items: s.fusion_items,
        };
        serde_json::to_writer(&mut log, &line).map_err(|e| Error::Io(e.into()))?;
        log.write_all(b"\n")?;
        log.flush()?;
        final_loss = Some(s.loss);
        Ok(())
    })?;
    drop(log);

    checkpoint::save(
        &out_dir.join(FINAL_CHECKPOINT),
        &trainer.model,
        Some(&trainer.optimizer),
        Some(&config_hash),
        Some(&corpus_hash),
    )?;
    checkpoint::save(
        &out_dir.join(BEST_CHECKPOINT),
        &trainer.best_model(),
        None,
        Some(&config_hash),
        Some(&corpus_hash),
    )?;
    let summary = RunSummary {
        config_hash,
        corpus_hash,
        steps: trainer.step(),
        final_loss,
        best_step: trainer.best.as_ref().map(|b| b.step),
        best_loss: trainer.best.as_ref().map(|b| b.loss),
    };
    fs::write(
        out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    Ok(summary)
}

pub const REPORT_JSONL: &str = "report.jsonl";
pub const REPORT_TABLE: &str = "report.txt";

/// Evaluates a checkpoint and writes the report as JSON lines and a table.
pub fn eval_run(
    checkpoint_path: &Path,
    corpus_path: &Path,
    mode: EvalMode,
    strategy: Strategy,
    out_dir: &Path,
) -> Result<RetrievalReport> {
    let ck = checkpoint::load(checkpoint_path)?;
    let corpus = load_corpus(corpus_path)?;
    let report = evaluate(&ck.model, &corpus, mode, strategy)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(REPORT_JSONL), report.to_json_lines())?;
    fs::write(out_dir.join(REPORT_TABLE), report.to_table())?;
    Ok(report)
}

/// Evaluation mode used for a strategy in the ablation: `vision_only` is
/// scored exactly like the scene-text-free path.
pub fn ablation_mode(strategy: Strategy) -> EvalMode {
    match strategy {
        Strategy::VisionOnly => EvalMode::SceneTextFree,
        _ => EvalMode::SceneTextAware,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub final_loss: Option<f64>,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub corpus_hash: String,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("corpus {}\nconfig {}\n", self.corpus_hash, self.config_hash);
        out.push_str("strategy       mode              i2t R@1  i2t R@5  t2i R@1  t2i R@5  t2i R@10\n");
        for r in &self.rows {
            let (i, t) = (&r.report.image_to_text, &r.report.text_to_image);
            out.push_str(&format!(
                "{:<14} {:<17} {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>8.3}\n",
                r.strategy.name(),
                r.report.mode.name(),
                i.r1,
                i.r5,
                t.r1,
                t.r5,
                t.r10
            ));
        }
        out
    }
}

/// Trains and evaluates one model per strategy on the same corpus.
pub fn ablate(cfg: &RunConfig, corpus: &[CorpusItem], strategies: &[Strategy]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let cfg = RunConfig {
            strategy,
            ..cfg.clone()
        };
        let mut trainer = Trainer::new(&cfg, corpus)?;
        let mut final_loss = None;
        trainer.run(|_, s| {
            final_loss = Some(s.loss);
            Ok(())
        })?;
        let report = evaluate(&trainer.model, corpus, ablation_mode(strategy), strategy)?;
        log::info!("{strategy}: t2i R@1 {:.3}", report.text_to_image.r1);
        rows.push(AblationRow {
            strategy,
            final_loss,
            report,
        });
    }
    Ok(AblationReport {
        corpus_hash: corpus_hash(corpus),
        config_hash: cfg.hash(),
        rows,
    })
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

pub fn ablate_run(cfg: &RunConfig, strategies: &[Strategy], out_dir: &Path) -> Result<AblationReport> {
    cfg.validate(true)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let report = ablate(cfg, &corpus, strategies)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG), cfg.to_toml())?;
    fs::write(
        out_dir.join(ABLATION_JSON),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    fs::write(out_dir.join(ABLATION_TABLE), report.to_table())?;
    Ok(report)
}
