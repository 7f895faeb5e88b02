//! Architecture hyperparameters and the full set of learnable tensors.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::encoders::Vocab;
use crate::error::{config, Result};
use crate::init::{zeros, Initializer};
use crate::layers::TransformerLayerParams;
use crate::numerics::{ParamId, ParamSet, Tensor};

/// Initial temperature of the contrastive softmax.
pub const SIGMA_INIT: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// Model width `d`.
    pub width: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub scene_text_layers: usize,
    pub text_layers: usize,
    /// Number of aggregation layers, taken from the top of both visual towers.
    pub fusion_layers: usize,
    /// Shared embedding dimension.
    pub embed_dim: usize,
    pub max_ocr: usize,
    /// Caption word cap; the text sequence is `[CLS]` plus at most this many.
    pub max_text: usize,
    #[serde(default = "one")]
    pub fusion_tokens: usize,
}

fn one() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            image_height: 8,
            image_width: 8,
            channels: 3,
            width: 32,
            heads: 4,
            vision_layers: 2,
            scene_text_layers: 2,
            text_layers: 2,
            fusion_layers: 1,
            embed_dim: 32,
            max_ocr: 8,
            max_text: 12,
            fusion_tokens: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("width", self.width),
            ("heads", self.heads),
            ("vision_layers", self.vision_layers),
            ("scene_text_layers", self.scene_text_layers),
            ("text_layers", self.text_layers),
            ("embed_dim", self.embed_dim),
            ("max_ocr", self.max_ocr),
            ("max_text", self.max_text),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width < 2 {
            return Err(config("width must be at least 2 for layer normalization"));
        }
        if self.fusion_layers > self.vision_layers.min(self.scene_text_layers) {
            return Err(config(format!(
                "fusion_layers {} exceeds min(vision_layers, scene_text_layers) = {}",
                self.fusion_layers,
                self.vision_layers.min(self.scene_text_layers)
            )));
        }
        if self.fusion_layers == 0 {
            log::warn!("fusion_layers = 0: the fusion embedding will not see any input");
        }
        if self.fusion_tokens != 1 {
            return Err(config("only a single fusion token is supported"));
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub img_token: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<TransformerLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTextParams {
    pub word_emb: ParamId,
    pub type_emb: ParamId,
    pub pos_emb: ParamId,
    pub bbox_w: ParamId,
    pub bbox_b: ParamId,
    pub layers: Vec<TransformerLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextParams {
    pub word_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<TransformerLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub init: ParamId,
    pub type_emb: ParamId,
    pub token_id: ParamId,
}

/// Linear `d → embed_dim` maps for each output token type.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub image: ParamId,
    pub fusion: ParamId,
    pub text: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub vision: VisionParams,
    pub scene_text: SceneTextParams,
    pub text: TextParams,
    pub fusion: FusionParams,
    pub heads: HeadParams,
    pub log_sigma: ParamId,
}

impl ModelLayout {
    /// Registers every tensor in a fixed order, so the same config and
    /// vocabulary size always produce the same names and ids.
    pub fn register(
        cfg: &ModelConfig,
        vocab_size: usize,
        params: &mut ParamSet,
        init: &mut Initializer,
    ) -> Result<Self> {
        let d = cfg.width;
        let layers = |params: &mut ParamSet, init: &mut Initializer, tower: &str, n: usize| {
            (0..n)
                .map(|i| {
                    TransformerLayerParams::register(params, &format!("{tower}.layer{i}"), d, cfg.heads, init)
                })
                .collect::<Result<Vec<_>>>()
        };

        let vision = VisionParams {
            patch_w: params.insert("vision.patch.w", init.linear(cfg.patch_dim(), d))?,
            patch_b: params.insert("vision.patch.b", zeros(&[d]))?,
            img_token: params.insert("vision.img_token", init.embedding(&[d]))?,
            pos_emb: params.insert("vision.pos", init.embedding(&[cfg.num_patches() + 1, d]))?,
            layers: layers(params, init, "vision", cfg.vision_layers)?,
        };
        let scene_text = SceneTextParams {
            word_emb: params.insert("scene.word", init.embedding(&[vocab_size, d]))?,
            type_emb: params.insert("scene.type", init.embedding(&[d]))?,
            pos_emb: params.insert("scene.pos", init.embedding(&[cfg.max_ocr, d]))?,
            bbox_w: params.insert("scene.bbox.w", init.linear(4, d))?,
            bbox_b: params.insert("scene.bbox.b", zeros(&[d]))?,
            layers: layers(params, init, "scene", cfg.scene_text_layers)?,
        };
        let text = TextParams {
            word_emb: params.insert("text.word", init.embedding(&[vocab_size, d]))?,
            pos_emb: params.insert("text.pos", init.embedding(&[cfg.max_text + 1, d]))?,
            layers: layers(params, init, "text", cfg.text_layers)?,
        };
        let fusion = FusionParams {
            init: params.insert("fusion.init", init.embedding(&[d]))?,
            type_emb: params.insert("fusion.type", init.embedding(&[d]))?,
            token_id: params.insert("fusion.token_id", init.embedding(&[d]))?,
        };
        let heads = HeadParams {
            image: params.insert("head.image", init.linear(d, cfg.embed_dim))?,
            fusion: params.insert("head.fusion", init.linear(d, cfg.embed_dim))?,
            text: params.insert("head.text", init.linear(d, cfg.embed_dim))?,
        };
        let log_sigma = params.insert("log_sigma", Tensor::scalar(SIGMA_INIT.ln()))?;
        Ok(Self {
            vision,
            scene_text,
            text,
            fusion,
            heads,
            log_sigma,
        })
    }
}

/// Counts tower invocations; used to check which towers a code path runs.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    vision: AtomicUsize,
    scene_text: AtomicUsize,
    text: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub vision: usize,
    pub scene_text: usize,
    pub text: usize,
}

impl ForwardCounters {
    pub(crate) fn vision(&self) {
        self.vision.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn scene_text(&self) {
        self.scene_text.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn text(&self) {
        self.text.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            vision: self.vision.load(Ordering::Relaxed),
            scene_text: self.scene_text.load(Ordering::Relaxed),
            text: self.text.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.vision.store(0, Ordering::Relaxed);
        self.scene_text.store(0, Ordering::Relaxed);
        self.text.store(0, Ordering::Relaxed);
    }
}

/// Config, vocabulary, and parameters of a complete model.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub layout: ModelLayout,
    pub counters: ForwardCounters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            counters: ForwardCounters::default(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seed);
        let layout = ModelLayout::register(&config, vocab.len(), &mut params, &mut init)?;
        Ok(Self {
            config,
            vocab,
            params,
            layout,
            counters: ForwardCounters::default(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.params.get(self.layout.log_sigma).item().exp()
    }

    /// Vision layers run before aggregation.
    pub fn plain_vision_layers(&self) -> &[TransformerLayerParams] {
        &self.layout.vision.layers[..self.config.vision_layers - self.config.fusion_layers]
    }

    pub fn plain_scene_text_layers(&self) -> &[TransformerLayerParams] {
        &self.layout.scene_text.layers[..self.config.scene_text_layers - self.config.fusion_layers]
    }

    /// `(vision, scene-text)` layer pairs that form the aggregation stack.
    pub fn aggregation_layers(
        &self,
    ) -> impl Iterator<Item = (&TransformerLayerParams, &TransformerLayerParams)> {
        let cfg = &self.config;
        self.layout.vision.layers[cfg.vision_layers - cfg.fusion_layers..]
            .iter()
            .zip(&self.layout.scene_text.layers[cfg.scene_text_layers - cfg.fusion_layers..])
    }
}
