//! Pre-norm transformer building blocks.
//!
//! A layer computes
//!
//! ```text
//! Y   = MHSA(LN(X)) + X
//! out = MLP(LN(Y)) + Y        MLP = linear → GELU → linear
//! ```
//!
//! Attention projections are stored per head (`d → d/h` for Q, K, V and
//! `d/h → d` for the output), so concatenating heads and projecting is the
//! sum of the per-head output projections.

use crate::error::{config, Result};
use crate::init::{ones, zeros, Initializer};
use crate::numerics::{ParamId, ParamSet, Tape, Var};

/// MLP hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: Vec<ParamId>,
}

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: AttentionParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl TransformerLayerParams {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        heads: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(config(format!("width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let mut per_head = |name: &str, rows: usize, cols: usize, init: &mut Initializer| {
            (0..heads)
                .map(|h| params.insert(format!("{prefix}.attn.{name}.{h}"), init.linear(rows, cols)))
                .collect::<Result<Vec<_>>>()
        };
        let attn = AttentionParams {
            wq: per_head("wq", d, dh, init)?,
            wk: per_head("wk", d, dh, init)?,
            wv: per_head("wv", d, dh, init)?,
            // fan-in of the concatenated heads is d
            wo: (0..heads)
                .map(|h| {
                    params.insert(
                        format!("{prefix}.attn.wo.{h}"),
                        init.normal(&[dh, d], 1.0 / (d as f64).sqrt()),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let hidden = MLP_RATIO * d;
        Ok(Self {
            ln1_gain: params.insert(format!("{prefix}.ln1.gain"), ones(&[d]))?,
            ln1_bias: params.insert(format!("{prefix}.ln1.bias"), zeros(&[d]))?,
            attn,
            ln2_gain: params.insert(format!("{prefix}.ln2.gain"), ones(&[d]))?,
            ln2_bias: params.insert(format!("{prefix}.ln2.bias"), zeros(&[d]))?,
            mlp_w1: params.insert(format!("{prefix}.mlp.w1"), init.linear(d, hidden))?,
            mlp_b1: params.insert(format!("{prefix}.mlp.b1"), zeros(&[hidden]))?,
            mlp_w2: params.insert(format!("{prefix}.mlp.w2"), init.linear(hidden, d))?,
            mlp_b2: params.insert(format!("{prefix}.mlp.b2"), zeros(&[d]))?,
        })
    }

    /// Every parameter id owned by the layer.
    pub fn ids(&self) -> Vec<ParamId> {
        let a = &self.attn;
        let mut ids = vec![self.ln1_gain, self.ln1_bias];
        ids.extend(a.wq.iter().chain(&a.wk).chain(&a.wv).chain(&a.wo));
        ids.extend([
            self.ln2_gain,
            self.ln2_bias,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]);
        ids
    }
}

/// Row-wise layer normalization followed by the gain/bias affine map.
pub fn layer_norm(tape: &mut Tape<'_>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let z = tape.standardize_rows(x)?;
    let scaled = tape.mul_row(z, gain)?;
    tape.add_row(scaled, bias)
}

/// Multi-head self-attention; also returns each head's attention matrix.
pub fn mhsa_with_weights(
    tape: &mut Tape<'_>,
    x: Var,
    p: &AttentionParams,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(x).cols();
    let heads = p.heads();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut out: Option<Var> = None;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (wq, wk, wv, wo) = (
            tape.param(p.wq[h]),
            tape.param(p.wk[h]),
            tape.param(p.wv[h]),
            tape.param(p.wo[h]),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let proj = tape.matmul(ctx, wo)?;
        out = Some(match out {
            None => proj,
            Some(acc) => tape.add(acc, proj)?,
        });
        weights.push(attn);
    }
    Ok((out.expect("at least one head"), weights))
}

pub fn mhsa(tape: &mut Tape<'_>, x: Var, p: &AttentionParams) -> Result<Var> {
    Ok(mhsa_with_weights(tape, x, p)?.0)
}

pub fn mlp(tape: &mut Tape<'_>, x: Var, p: &TransformerLayerParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        tape.param(p.mlp_w1),
        tape.param(p.mlp_b1),
        tape.param(p.mlp_w2),
        tape.param(p.mlp_b2),
    );
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

pub fn transformer_layer(tape: &mut Tape<'_>, x: Var, p: &TransformerLayerParams) -> Result<Var> {
    let (g1, b1) = (tape.param(p.ln1_gain), tape.param(p.ln1_bias));
    let normed = layer_norm(tape, x, g1, b1)?;
    let attn = mhsa(tape, normed, &p.attn)?;
    let y = tape.add(attn, x)?;

    let (g2, b2) = (tape.param(p.ln2_gain), tape.param(p.ln2_bias));
    let normed = layer_norm(tape, y, g2, b2)?;
    let m = mlp(tape, normed, p)?;
    tape.add(m, y)
}

/// Applies `layers` in order.
pub fn transformer_stack(
    tape: &mut Tape<'_>,
    mut x: Var,
    layers: &[TransformerLayerParams],
) -> Result<Var> {
    for layer in layers {
        x = transformer_layer(tape, x, layer)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamSet, TransformerLayerParams) {
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seed);
        let layer = TransformerLayerParams::register(&mut params, "l0", d, heads, &mut init).unwrap();
        (params, layer)
    }

    fn input(n: usize, d: usize, seed: u64) -> Tensor {
        Initializer::new(seed).normal(&[n, d], 1.0)
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![5.0; 4]).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 4]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0; 4]).unwrap());
        let y = layer_norm(&mut tape, x, g, b).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 2]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0; 2]).unwrap());
        let y = layer_norm(&mut tape, x, g, b).unwrap();
        let v = tape.value(y).values();
        // 1/sqrt(1 + 1e-5)
        assert!((v[0] - 0.999_995_000_037_5).abs() < 1e-12);
        assert!((v[1] + 0.999_995_000_037_5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_affine_matches_direct_formula() {
        let row = [0.3, -1.7, 2.2, 0.05, 4.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 5, row.to_vec()).unwrap());
        let g = tape.constant(Tensor::vector(vec![2.0; 5]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0; 5]).unwrap());
        let y = layer_norm(&mut tape, x, g, b).unwrap();
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for (o, v) in tape.value(y).values().iter().zip(row) {
            let expect = 2.0 * (v - mean) / (var + 1e-5).sqrt() + 1.0;
            assert!((o - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let (params, layer) = setup(4, 2, 3);
        let x = input(1, 4, 9);
        let mut tape = Tape::with_params(&params, false);
        let xv = tape.constant(x.clone());
        let (out, weights) = mhsa_with_weights(&mut tape, xv, &layer.attn).unwrap();
        for w in &weights {
            assert_eq!(tape.value(*w).values(), &[1.0]);
        }
        let mut expect = vec![0.0; 4];
        for h in 0..2 {
            let v = x.matmul(params.get(layer.attn.wv[h])).unwrap();
            let o = v.matmul(params.get(layer.attn.wo[h])).unwrap();
            for (e, x) in expect.iter_mut().zip(o.values()) {
                *e += x;
            }
        }
        for (a, b) in tape.value(out).values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let (params, layer) = setup(8, 2, 4);
        let row = input(1, 8, 1).into_values();
        let x = Tensor::matrix(3, 8, [row.clone(), row.clone(), row].concat()).unwrap();
        let mut tape = Tape::with_params(&params, false);
        let xv = tape.constant(x);
        let y = transformer_layer(&mut tape, xv, &layer).unwrap();
        let out = tape.value(y);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn zero_weights_give_identity_layer() {
        let (mut params, layer) = setup(8, 2, 5);
        let a = &layer.attn;
        for id in a.wq.iter().chain(&a.wk).chain(&a.wv).chain(&a.wo) {
            let n = params.get(*id).numel();
            params.set_values(*id, &vec![0.0; n]).unwrap();
        }
        for id in [layer.mlp_w1, layer.mlp_w2] {
            let n = params.get(id).numel();
            params.set_values(id, &vec![0.0; n]).unwrap();
        }
        let x = input(4, 8, 2);
        let mut tape = Tape::with_params(&params, false);
        let xv = tape.constant(x.clone());
        let y = transformer_layer(&mut tape, xv, &layer).unwrap();
        assert_eq!(tape.value(y).values(), x.values());
    }

    #[test]
    fn shape_is_preserved() {
        let (params, layer) = setup(8, 2, 6);
        for n in [1, 4, 17] {
            let mut tape = Tape::with_params(&params, false);
            let xv = tape.constant(input(n, 8, n as u64));
            let y = transformer_layer(&mut tape, xv, &layer).unwrap();
            assert_eq!(tape.shape(y), &[n, 8]);
        }
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut params = ParamSet::new();
        let mut init = Initializer::new(0);
        assert!(TransformerLayerParams::register(&mut params, "x", 6, 4, &mut init).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (params, layer) = setup(8, 2, 7);
        let x = input(4, 8, 8);
        let target = input(4, 8, 9);
        let report = grad_check(&params, 1e-5, |tape| {
            let xv = tape.constant(x.clone());
            let y = transformer_layer(tape, xv, &layer)?;
            let t = tape.constant(target.clone());
            let prod = tape.mul(y, t)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
