//! Dual contrastive objective and the training step.
//!
//! `L_total = α·L_itc + (1 − α)·L_ftc`, where both terms are symmetric
//! InfoNCE losses with a shared trainable temperature `σ = exp(log_sigma)`.
//! The fusion term covers only the OCR-bearing items of a batch and is
//! dropped when fewer than two of them are present.

use serde::{Deserialize, Serialize};

use crate::aggregation::{tower_forward, Strategy};
use crate::encoders::{text_encode, ImageRecord, OcrToken};
use crate::error::{contract, Error, Result};
use crate::model::Model;
use crate::numerics::{ParamSet, Tape, Tensor, Var};

pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Weight of the image-text term.
    pub alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 0.9 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Embedding matrices of one batch, as tape handles.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    /// `[N, D_e]` image embeddings.
    pub v: Var,
    /// `[N, D_e]` caption embeddings.
    pub t: Var,
    /// `[M, D_e]` fusion embeddings of the OCR-bearing items.
    pub f: Option<Var>,
    /// Batch positions of the rows of `f`, strictly increasing.
    pub fusion_index: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub itc: Var,
    pub ftc: Option<Var>,
}

/// Symmetric InfoNCE between matched rows of `x` and `t`:
/// `½(L_x2t + L_t2x)` over the logits `x·tᵀ / σ`.
pub fn contrastive_pair_loss(tape: &mut Tape<'_>, x: Var, t: Var, sigma: Var) -> Result<Var> {
    let k = tape.value(x).rows();
    if k == 0 || tape.shape(x).len() != 2 {
        return Err(contract("contrastive loss needs at least one pair"));
    }
    if tape.shape(x) != tape.shape(t) {
        return Err(Error::Shape {
            op: "contrastive_pair_loss",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(t).to_vec(),
        });
    }
    let tt = tape.transpose(t)?;
    let sims = tape.matmul(x, tt)?;
    let logits = tape.div_scalar(sims, sigma)?;

    let mut eye = vec![0.0; k * k];
    for i in 0..k {
        eye[i * k + i] = 1.0;
    }
    let eye = tape.constant(Tensor::matrix(k, k, eye)?);

    let direction = |tape: &mut Tape<'_>, logits: Var| -> Result<Var> {
        let lp = tape.log_softmax_rows(logits)?;
        let diag = tape.mul(lp, eye)?;
        let s = tape.sum(diag)?;
        tape.scale(s, -1.0 / k as f64)
    };
    let x2t = direction(tape, logits)?;
    let lt = tape.transpose(logits)?;
    let t2x = direction(tape, lt)?;
    let both = tape.add(x2t, t2x)?;
    tape.scale(both, 0.5)
}

/// Combined loss with the missing-OCR rule applied.
pub fn total_loss(tape: &mut Tape<'_>, batch: &BatchEmbeddings, alpha: f64, sigma: Var) -> Result<LossTerms> {
    let n = tape.value(batch.v).rows();
    let idx = &batch.fusion_index;
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i >= n) {
        return Err(contract("fusion_index must be strictly increasing and within the batch"));
    }
    let itc = contrastive_pair_loss(tape, batch.v, batch.t, sigma)?;
    let f = match batch.f {
        Some(f) if idx.len() >= 2 => f,
        _ => {
            return Ok(LossTerms {
                total: itc,
                itc,
                ftc: None,
            })
        }
    };
    if tape.value(f).rows() != idx.len() {
        return Err(contract("fusion rows do not match fusion_index"));
    }
    let t_sub = tape.gather_rows(batch.t, idx)?;
    let ftc = contrastive_pair_loss(tape, f, t_sub, sigma)?;
    let a = tape.scale(itc, alpha)?;
    let b = tape.scale(ftc, 1.0 - alpha)?;
    let total = tape.add(a, b)?;
    Ok(LossTerms {
        total,
        itc,
        ftc: Some(ftc),
    })
}

/// One image-caption pair of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub id: &'a str,
    pub image: &'a ImageRecord,
    pub ocr: &'a [OcrToken],
    pub caption: &'a str,
}

/// Forward pass of every tower over a batch plus the loss, on `tape`.
pub fn batch_forward(
    tape: &mut Tape<'_>,
    model: &Model,
    pairs: &[TrainPair<'_>],
    strategy: Strategy,
    loss: &LossParams,
) -> Result<LossTerms> {
    let mut vs = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    let mut fs = Vec::new();
    let mut fusion_index = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let out = tower_forward(tape, model, pair.image, pair.ocr, strategy)?;
        vs.push(out.v);
        if let Some(f) = out.f {
            fs.push(f);
            fusion_index.push(i);
        }
        ts.push(text_encode(tape, model, pair.caption)?);
    }
    let batch = BatchEmbeddings {
        v: tape.concat_rows(&vs)?,
        t: tape.concat_rows(&ts)?,
        f: if fs.is_empty() { None } else { Some(tape.concat_rows(&fs)?) },
        fusion_index,
    };
    let log_sigma = tape.param(model.layout.log_sigma);
    let sigma = tape.exp(log_sigma)?;
    total_loss(tape, &batch, loss.alpha, sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Adam moments for every tensor of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected update. `grads` is aligned with `params`.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let values = params.get_mut(id).values_mut();
            for j in 0..values.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                if lr != 0.0 {
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub itc: f64,
    pub ftc: Option<f64>,
    pub sigma: f64,
    pub fusion_items: usize,
}

/// Forward, backward, Adam update, then the temperature clamp.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    pairs: &[TrainPair<'_>],
    strategy: Strategy,
    loss: &LossParams,
) -> Result<StepStats> {
    if pairs.len() < 2 {
        return Err(contract("a training batch needs at least two pairs"));
    }
    let (stats, grads) = {
        let mut tape = Tape::with_params(&model.params, true);
        let terms = match batch_forward(&mut tape, model, pairs, strategy, loss) {
            Ok(t) => t,
            Err(Error::NonFinite(_)) => return Err(diverged(opt.step, pairs)),
            Err(e) => return Err(e),
        };
        let total = tape.value(terms.total).item();
        if !total.is_finite() {
            return Err(diverged(opt.step, pairs));
        }
        match tape.backward(terms.total) {
            Err(Error::NonFinite(_)) => return Err(diverged(opt.step, pairs)),
            r => r?,
        }
        let grads: Vec<Vec<f64>> = model
            .params
            .ids()
            .map(|id| tape.param_grad(id).expect("params bound"))
            .collect();
        let stats = StepStats {
            loss: total,
            itc: tape.value(terms.itc).item(),
            ftc: terms.ftc.map(|f| tape.value(f).item()),
            sigma: model.sigma(),
            fusion_items: match strategy {
                Strategy::VisionOnly => 0,
                _ => pairs.iter().filter(|p| !p.ocr.is_empty()).count(),
            },
        };
        (stats, grads)
    };
    opt.update(&mut model.params, &grads);
    clamp_sigma(model);
    Ok(stats)
}

fn diverged(step: u64, pairs: &[TrainPair<'_>]) -> Error {
    Error::Diverged {
        step,
        ids: pairs.iter().map(|p| p.id.to_string()).collect(),
    }
}

/// Keeps `σ` inside `[SIGMA_MIN, SIGMA_MAX]`.
pub fn clamp_sigma(model: &mut Model) {
    let id = model.layout.log_sigma;
    let ls = &mut model.params.get_mut(id).values_mut()[0];
    *ls = ls.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln());
}
