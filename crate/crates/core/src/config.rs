//! Flat key-value run configuration shared by every phase.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{DistinctiveConfig, TextureConfig};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{ContextualConfig, LossWeights};

/// Network providing the diversity code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSource {
    VggLike,
    IdentityLike,
}

/// Network providing the distinctive code and the style-prior embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    MfmLike,
    IdentityLike,
    TextimageLike,
}

/// Embedding compared by the style-prior consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsuEmbedding {
    Style,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Working resolution of every image and of the generator output.
    pub output_size: usize,

    // generator phase
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub p_same: f64,
    pub eval_interval: usize,
    pub joint_training: bool,

    // loss weights and contextual kernel
    pub lambda_psu: f64,
    pub lambda_rec: f64,
    pub lambda_ccx: f64,
    pub lambda_scx: f64,
    pub lambda_id: f64,
    pub lambda_textimage: f64,
    pub cx_bandwidth: f64,
    pub cx_epsilon: f64,
    pub cx_max_positions: usize,
    pub cx_taps: Vec<String>,

    // architecture
    pub content_tap: String,
    pub div_tap: String,
    pub n_usm_blocks: usize,
    pub style_dim: usize,
    pub base_channels: usize,
    pub texture_widths: Vec<usize>,
    pub texture_convs: Vec<usize>,
    pub classifier_widths: Vec<usize>,

    // ablation switches
    pub texture: TextureSource,
    pub style: StyleSource,
    pub psu_embedding: PsuEmbedding,
    pub use_ds: bool,
    pub use_div: bool,
    /// `fallback`, `none` or `external:<path>`.
    pub identity_backend: String,
    pub textimage_backend: String,

    // classifier phase
    pub cls_iterations: usize,
    pub cls_batch_size: usize,
    pub cls_lr: f64,
    pub cls_target_accuracy: f64,
    pub cls_check_interval: usize,

    // evaluation
    pub eval_contents_per_domain: usize,
    pub niqe_patch: usize,
    pub niqe_sharpness_quantile: f64,
    /// Domain whose images form the pristine NIQE corpus.
    pub niqe_domain: usize,
    /// 0 evaluates KID on the full sets.
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub collapse_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 64px, 4 blocks, 128-d codes, 128x8x8 content.
    pub fn desk() -> Self {
        let w = LossWeights::full_scale();
        let cx = ContextualConfig::default();
        let tex = TextureConfig::desk();
        Self {
            seed: 0,
            output_size: 64,
            iterations: 2000,
            batch_size: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            p_same: 0.2,
            eval_interval: 500,
            joint_training: false,
            lambda_psu: w.lambda_psu,
            lambda_rec: w.lambda_rec,
            lambda_ccx: w.lambda_ccx,
            lambda_scx: w.lambda_scx,
            lambda_id: w.lambda_id,
            lambda_textimage: w.lambda_textimage,
            cx_bandwidth: cx.bandwidth,
            cx_epsilon: cx.epsilon,
            cx_max_positions: cx.max_positions,
            cx_taps: cx.taps,
            content_tap: tex.content_tap,
            div_tap: tex.div_tap,
            n_usm_blocks: 4,
            style_dim: tex.style_dim,
            base_channels: 128,
            texture_widths: tex.widths,
            texture_convs: tex.convs,
            classifier_widths: DistinctiveConfig::desk(2).widths,
            texture: TextureSource::VggLike,
            style: StyleSource::MfmLike,
            psu_embedding: PsuEmbedding::Style,
            use_ds: true,
            use_div: true,
            identity_backend: "fallback".into(),
            textimage_backend: "fallback".into(),
            cls_iterations: 500,
            cls_batch_size: 16,
            cls_lr: 1e-3,
            cls_target_accuracy: 1.0,
            cls_check_interval: 25,
            eval_contents_per_domain: 10,
            niqe_patch: 16,
            niqe_sharpness_quantile: 0.5,
            niqe_domain: 0,
            kid_subset_size: 0,
            kid_subsets: 0,
            collapse_tolerance: 0.05,
        }
    }

    /// 256px, 8 blocks, 512-d codes, 512x32x32 content.
    pub fn full_scale() -> Self {
        let tex = TextureConfig::full_scale();
        Self {
            output_size: 256,
            n_usm_blocks: 8,
            style_dim: 512,
            base_channels: 512,
            texture_widths: tex.widths,
            texture_convs: tex.convs,
            classifier_widths: DistinctiveConfig::full_scale(2).widths,
            niqe_patch: 96,
            ..Self::desk()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_psu: self.lambda_psu,
            lambda_rec: self.lambda_rec,
            lambda_ccx: self.lambda_ccx,
            lambda_scx: self.lambda_scx,
            lambda_id: self.lambda_id,
            lambda_textimage: self.lambda_textimage,
        }
    }

    pub fn contextual(&self) -> ContextualConfig {
        ContextualConfig {
            bandwidth: self.cx_bandwidth,
            epsilon: self.cx_epsilon,
            taps: self.cx_taps.clone(),
            max_positions: self.cx_max_positions,
            seed: self.seed,
        }
    }

    pub fn texture_config(&self) -> TextureConfig {
        TextureConfig {
            input_size: self.output_size,
            widths: self.texture_widths.clone(),
            convs: self.texture_convs.clone(),
            content_tap: self.content_tap.clone(),
            div_tap: self.div_tap.clone(),
            style_dim: self.style_dim,
        }
    }

    pub fn classifier_config(&self, n_classes: usize) -> DistinctiveConfig {
        DistinctiveConfig {
            input_size: self.output_size,
            widths: self.classifier_widths.clone(),
            style_dim: self.style_dim,
            n_classes,
        }
    }

    /// Generator layout matching the content tap's channels and stride.
    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let tex = self.texture_config();
        let stride = tex.tap_stride(&self.content_tap)?;
        let mut g = GeneratorConfig::layout(
            tex.tap_channels(&self.content_tap)?,
            self.output_size / stride,
            self.output_size,
            self.style_dim,
            self.n_usm_blocks,
            self.base_channels,
        )?;
        g.use_ds = self.use_ds;
        g.use_div = self.use_div;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if self.eval_interval < 1 || self.eval_interval > self.iterations {
            return bad("eval_interval must be in 1..=iterations");
        }
        if self.batch_size < 1 || self.cls_batch_size < 1 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr > 0.0) || !(self.cls_lr > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.p_same) {
            return bad("p_same must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.niqe_sharpness_quantile) || self.niqe_patch < 8 {
            return bad("NIQE needs a patch of at least 8 and a quantile in [0, 1]");
        }
        if !(self.collapse_tolerance >= 0.0) {
            return bad("collapse_tolerance must be non-negative");
        }
        if self.cls_check_interval < 1 {
            return bad("cls_check_interval must be positive");
        }
        self.weights().validate()?;
        self.contextual().validate()?;
        let tex = self.texture_config();
        tex.validate()?;
        for t in &self.cx_taps {
            tex.tap_index(t)?;
        }
        self.classifier_config(2).validate()?;
        self.generator_config()?.validate()
    }
}
