//! Fusion-token aggregation between the vision and scene-text towers.
//!
//! Each aggregation layer runs the vision layer on `[V; F]` and the
//! scene-text layer on `[S; F]`, both reading the same `F`. The next fusion
//! token is the element-wise sum of the two outputs at the `F` position. The
//! two towers exchange information only through that token.

use serde::{Deserialize, Serialize};

use crate::encoders::{patchify, scene_text_backbone, scene_text_embed, vision_backbone, ImageRecord, OcrToken};
use crate::error::{contract, Result};
use crate::layers::{transformer_layer, transformer_stack, TransformerLayerParams};
use crate::model::Model;
use crate::numerics::{ParamId, Tape, Var};

/// How the visual tower consumes scene text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Shared `[FUS]` token across aggregation layers.
    FusionToken,
    /// Independent towers; `[IMG]` plus mean-pooled scene text.
    LateFusion,
    /// Scene text ignored.
    VisionOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FusionToken, Strategy::LateFusion, Strategy::VisionOnly];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FusionToken => "fusion_token",
            Strategy::LateFusion => "late_fusion",
            Strategy::VisionOnly => "vision_only",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                format!("unknown strategy `{s}`; valid: {}", valid.join(", "))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Vision tokens, scene-text tokens, and the single fusion token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionState {
    pub vision: Var,
    pub scene_text: Var,
    pub fusion: Var,
}

/// Tape handles of a visual-tower forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TowerVars {
    /// `[1, D_e]` unit-norm image embedding.
    pub v: Var,
    /// `[1, D_e]` unit-norm fusion embedding, present iff OCR was used.
    pub f: Option<Var>,
}

/// Plain embeddings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerOutput {
    pub v: Vec<f64>,
    pub f: Option<Vec<f64>>,
    pub has_ocr: bool,
}

/// `F_0 = F_init + F_type + F_token_id`, as a `[1, d]` row.
pub fn init_fusion_token(tape: &mut Tape<'_>, init: ParamId, type_emb: ParamId, token_id: ParamId) -> Result<Var> {
    let (a, b, c) = (tape.param(init), tape.param(type_emb), tape.param(token_id));
    let ab = tape.add(a, b)?;
    let f = tape.add(ab, c)?;
    tape.as_row(f)
}

/// Runs one layer on `[tokens; F]` and splits off the fusion position.
fn layer_with_fusion(
    tape: &mut Tape<'_>,
    tokens: Var,
    fusion: Var,
    layer: &TransformerLayerParams,
) -> Result<(Var, Var)> {
    let n = tape.value(tokens).rows();
    let seq = tape.concat_rows(&[tokens, fusion])?;
    let out = transformer_layer(tape, seq, layer)?;
    Ok((tape.slice_rows(out, 0, n)?, tape.slice_rows(out, n, 1)?))
}

pub fn aggregation_layer(
    tape: &mut Tape<'_>,
    state: FusionState,
    vision_layer: &TransformerLayerParams,
    scene_text_layer: &TransformerLayerParams,
) -> Result<FusionState> {
    if tape.value(state.fusion).rows() != 1 {
        return Err(contract("fusion state must hold exactly one token"));
    }
    let (vision, v_fus) = layer_with_fusion(tape, state.vision, state.fusion, vision_layer)?;
    let (scene_text, s_fus) = layer_with_fusion(tape, state.scene_text, state.fusion, scene_text_layer)?;
    let fusion = tape.add(v_fus, s_fus)?;
    Ok(FusionState {
        vision,
        scene_text,
        fusion,
    })
}

fn project(tape: &mut Tape<'_>, row: Var, head: ParamId) -> Result<Var> {
    let w = tape.param(head);
    let e = tape.matmul(row, w)?;
    tape.normalize_rows(e)
}

fn image_embedding(tape: &mut Tape<'_>, model: &Model, vision: Var) -> Result<Var> {
    let img = tape.slice_rows(vision, 0, 1)?;
    project(tape, img, model.layout.heads.image)
}

/// Standalone vision encoder: patch embedding, all vision layers, `[IMG]`
/// projection. Never touches scene-text parameters.
pub fn vision_encoder_forward(tape: &mut Tape<'_>, model: &Model, image: &ImageRecord) -> Result<Var> {
    model.counters.vision();
    let seq = patchify(tape, model, image)?;
    let out = transformer_stack(tape, seq, &model.layout.vision.layers)?;
    image_embedding(tape, model, out)
}

/// Runs the scene-text tower up to (and including) the aggregation stage and
/// returns every intermediate fusion state; the first entry is the state
/// entering the first aggregation layer.
pub fn aggregate(
    tape: &mut Tape<'_>,
    model: &Model,
    image: &ImageRecord,
    ocr: &[OcrToken],
) -> Result<Vec<FusionState>> {
    model.counters.vision();
    model.counters.scene_text();
    let seq = patchify(tape, model, image)?;
    let vision = vision_backbone(tape, model, seq)?;
    let tokens = scene_text_embed(tape, model, ocr)?;
    let scene_text = scene_text_backbone(tape, model, tokens)?;
    let fp = &model.layout.fusion;
    let fusion = init_fusion_token(tape, fp.init, fp.type_emb, fp.token_id)?;

    let mut states = vec![FusionState {
        vision,
        scene_text,
        fusion,
    }];
    for (vl, sl) in model.aggregation_layers() {
        let next = aggregation_layer(tape, *states.last().unwrap(), vl, sl)?;
        states.push(next);
    }
    Ok(states)
}

/// Visual tower. Without OCR it is the plain vision encoder and `f` is
/// absent; with OCR the top `L_f` layers aggregate through `[FUS]`.
pub fn visual_tower_forward(
    tape: &mut Tape<'_>,
    model: &Model,
    image: &ImageRecord,
    ocr: &[OcrToken],
) -> Result<TowerVars> {
    if ocr.is_empty() {
        model.counters.vision();
        let seq = patchify(tape, model, image)?;
        let pre = vision_backbone(tape, model, seq)?;
        let top = &model.layout.vision.layers[model.plain_vision_layers().len()..];
        let out = transformer_stack(tape, pre, top)?;
        let v = image_embedding(tape, model, out)?;
        return Ok(TowerVars { v, f: None });
    }
    let states = aggregate(tape, model, image, ocr)?;
    let last = *states.last().unwrap();
    let v = image_embedding(tape, model, last.vision)?;
    let f = project(tape, last.fusion, model.layout.heads.fusion)?;
    Ok(TowerVars { v, f: Some(f) })
}

/// Late-fusion baseline: both towers run to completion independently and
/// `f` projects the final `[IMG]` state plus the mean scene-text state.
pub fn late_fusion_forward(
    tape: &mut Tape<'_>,
    model: &Model,
    image: &ImageRecord,
    ocr: &[OcrToken],
) -> Result<TowerVars> {
    if ocr.is_empty() {
        return Err(contract("late fusion needs at least one OCR token"));
    }
    model.counters.vision();
    model.counters.scene_text();
    let seq = patchify(tape, model, image)?;
    let vision = transformer_stack(tape, seq, &model.layout.vision.layers)?;
    let tokens = scene_text_embed(tape, model, ocr)?;
    let scene = transformer_stack(tape, tokens, &model.layout.scene_text.layers)?;

    let img = tape.slice_rows(vision, 0, 1)?;
    let pooled = tape.mean_rows(scene)?;
    let fused = tape.add(img, pooled)?;
    let v = project(tape, img, model.layout.heads.image)?;
    let f = project(tape, fused, model.layout.heads.fusion)?;
    Ok(TowerVars { v, f: Some(f) })
}

/// Visual tower under a training/evaluation strategy. `VisionOnly` ignores
/// OCR; `LateFusion` falls back to the vision encoder when OCR is empty.
pub fn tower_forward(
    tape: &mut Tape<'_>,
    model: &Model,
    image: &ImageRecord,
    ocr: &[OcrToken],
    strategy: Strategy,
) -> Result<TowerVars> {
    match strategy {
        Strategy::FusionToken => visual_tower_forward(tape, model, image, ocr),
        Strategy::LateFusion if !ocr.is_empty() => late_fusion_forward(tape, model, image, ocr),
        Strategy::LateFusion | Strategy::VisionOnly => visual_tower_forward(tape, model, image, &[]),
    }
}

impl Model {
    /// Embeds one image on a private tape.
    pub fn embed_image(&self, image: &ImageRecord, ocr: &[OcrToken], strategy: Strategy) -> Result<TowerOutput> {
        let mut tape = Tape::with_params(&self.params, false);
        let out = tower_forward(&mut tape, self, image, ocr, strategy)?;
        Ok(TowerOutput {
            v: tape.value(out.v).values().to_vec(),
            f: out.f.map(|f| tape.value(f).values().to_vec()),
            has_ocr: out.f.is_some(),
        })
    }

    /// Embeds one caption on a private tape.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params, false);
        let t = crate::encoders::text_encode(&mut tape, self, text)?;
        Ok(tape.value(t).values().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Vocab;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor;

    fn cfg(fusion_layers: usize) -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            image_height: 4,
            image_width: 4,
            channels: 1,
            width: 8,
            heads: 2,
            vision_layers: 2,
            scene_text_layers: 2,
            text_layers: 1,
            fusion_layers,
            embed_dim: 6,
            max_ocr: 4,
            max_text: 6,
            fusion_tokens: 1,
        }
    }

    fn model(fusion_layers: usize) -> Model {
        Model::new(cfg(fusion_layers), Vocab::from_words(["shop", "open", "cafe"]), 21).unwrap()
    }

    fn image() -> ImageRecord {
        let values = (0..16).map(|i| (i as f64 * 0.13).sin().abs()).collect();
        ImageRecord::new("img", 4, 4, 1, values).unwrap()
    }

    fn ocr() -> Vec<OcrToken> {
        vec![
            OcrToken::new("open", [0.1, 0.1, 0.5, 0.3]),
            OcrToken::new("cafe", [0.5, 0.5, 0.9, 0.8]),
        ]
    }

    fn rand_matrix(n: usize, d: usize, seed: u64) -> Tensor {
        crate::init::Initializer::new(seed).normal(&[n, d], 1.0)
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn fusion_token_init_is_sum_and_input_independent() {
        let m = model(1);
        let fp = &m.layout.fusion;
        let mut tape = Tape::with_params(&m.params, false);
        let f = init_fusion_token(&mut tape, fp.init, fp.type_emb, fp.token_id).unwrap();
        let p = &m.params;
        for j in 0..8 {
            let expect = p.get(fp.init).values()[j] + p.get(fp.type_emb).values()[j] + p.get(fp.token_id).values()[j];
            assert_eq!(tape.value(f).values()[j], expect);
        }
        assert_eq!(tape.shape(f), &[1, 8]);
    }

    #[test]
    fn zero_fusion_params_give_zero_token() {
        let mut m = model(1);
        let fp = m.layout.fusion.clone();
        for id in [fp.init, fp.type_emb, fp.token_id] {
            m.params.set_values(id, &[0.0; 8]).unwrap();
        }
        let mut tape = Tape::with_params(&m.params, false);
        let f = init_fusion_token(&mut tape, fp.init, fp.type_emb, fp.token_id).unwrap();
        assert_eq!(tape.value(f).values(), &[0.0; 8]);
    }

    #[test]
    fn zero_weight_aggregation_doubles_fusion_token() {
        let mut m = model(1);
        let (vl, sl) = m.aggregation_layers().next().map(|(a, b)| (a.clone(), b.clone())).unwrap();
        for layer in [&vl, &sl] {
            let a = &layer.attn;
            for id in a.wq.iter().chain(&a.wk).chain(&a.wv).chain(&a.wo).chain([&layer.mlp_w1, &layer.mlp_w2]) {
                let n = m.params.get(*id).numel();
                m.params.set_values(*id, &vec![0.0; n]).unwrap();
            }
        }
        let mut tape = Tape::with_params(&m.params, false);
        let v = tape.constant(rand_matrix(5, 8, 1));
        let s = tape.constant(rand_matrix(3, 8, 2));
        let f = tape.constant(rand_matrix(1, 8, 3));
        let state = FusionState {
            vision: v,
            scene_text: s,
            fusion: f,
        };
        let next = aggregation_layer(&mut tape, state, &vl, &sl).unwrap();
        assert_eq!(tape.value(next.vision), tape.value(v));
        assert_eq!(tape.value(next.scene_text), tape.value(s));
        let doubled: Vec<f64> = tape.value(f).values().iter().map(|x| x + x).collect();
        assert_eq!(tape.value(next.fusion).values(), doubled.as_slice());
        assert_eq!(tape.shape(next.vision), &[5, 8]);
        assert_eq!(tape.shape(next.scene_text), &[3, 8]);
        assert_eq!(tape.shape(next.fusion), &[1, 8]);
    }

    #[test]
    fn no_ocr_path_has_no_fusion_embedding_and_matches_vision_encoder() {
        let m = model(1);
        let out = m.embed_image(&image(), &[], Strategy::FusionToken).unwrap();
        assert!(out.f.is_none());
        assert!(!out.has_ocr);
        let mut tape = Tape::with_params(&m.params, false);
        let v = vision_encoder_forward(&mut tape, &m, &image()).unwrap();
        assert_eq!(tape.value(v).values(), out.v.as_slice());
    }

    #[test]
    fn ocr_path_outputs_unit_norm_embeddings() {
        let m = model(1);
        for strategy in [Strategy::FusionToken, Strategy::LateFusion] {
            let out = m.embed_image(&image(), &ocr(), strategy).unwrap();
            assert!((norm(&out.v) - 1.0).abs() < 1e-12);
            assert!((norm(out.f.as_ref().unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_fusion_layers_projects_initial_token() {
        let m = model(0);
        let mut tape = Tape::with_params(&m.params, false);
        let out = visual_tower_forward(&mut tape, &m, &image(), &ocr()).unwrap();
        let fp = &m.layout.fusion;
        let mut t2 = Tape::with_params(&m.params, false);
        let f0 = init_fusion_token(&mut t2, fp.init, fp.type_emb, fp.token_id).unwrap();
        let f = project(&mut t2, f0, m.layout.heads.fusion).unwrap();
        assert_eq!(tape.value(out.f.unwrap()).values(), t2.value(f).values());
    }

    #[test]
    fn ocr_changes_image_embedding_only_through_aggregation() {
        let m = model(1);
        let mut tape = Tape::with_params(&m.params, false);
        let states = aggregate(&mut tape, &m, &image(), &ocr()).unwrap();
        let mut t2 = Tape::with_params(&m.params, false);
        let seq = patchify(&mut t2, &m, &image()).unwrap();
        let pre = vision_backbone(&mut t2, &m, seq).unwrap();
        // identical up to the aggregation stage
        assert_eq!(tape.value(states[0].vision), t2.value(pre));
        let with = m.embed_image(&image(), &ocr(), Strategy::FusionToken).unwrap();
        let without = m.embed_image(&image(), &[], Strategy::FusionToken).unwrap();
        assert_ne!(with.v, without.v);
    }

    #[test]
    fn late_fusion_requires_ocr() {
        let m = model(1);
        let mut tape = Tape::with_params(&m.params, false);
        assert!(late_fusion_forward(&mut tape, &m, &image(), &[]).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        let err = "global_attention".parse::<Strategy>().unwrap_err();
        assert!(err.contains("fusion_token") && err.contains("vision_only"));
    }
}
