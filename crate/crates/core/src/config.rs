//! Run configuration.
//!
//! A config file is TOML with one table per pipeline stage. Every key is
//! optional; missing keys take the defaults below and unknown keys are
//! rejected. An empty file is a valid, all-defaults config.
//!
//! ```toml
//! [data]
//! height = 64
//! width = 64
//! max_objects = 3
//! train_size = 2000
//! val_size = 500
//! seed = 7
//!
//! [train]
//! cf_steps = 500
//! lambda_rec = 10.0
//! ```
//!
//! Optimizer settings, epochs, batch sizes and loss weights are artifact
//! defaults chosen for CPU-scale runs, not values taken from any reference
//! experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DatasetConfig,
    pub vqa: VqaConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl PaletteColor {
    fn new(name: &str, rgb: [u8; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    /// Must contain `{shape}`.
    pub color: String,
    /// Must contain `{color}`.
    pub shape: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            color: "what color is the {shape}".into(),
            shape: "what shape is the {color} object".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    /// Object half-extent range in pixels (inclusive).
    pub min_size: usize,
    pub max_size: usize,
    /// Named colors; shared by backgrounds and objects. Color answers are
    /// the palette names, in order.
    pub palette: Vec<PaletteColor>,
    pub templates: Templates,
    /// Probability that a sample asks a color (rather than shape) question.
    pub color_question_fraction: f64,
    /// Per question type, no answer may exceed this frequency.
    pub answer_cap: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    /// Placement attempts per object before a scene seed is abandoned.
    pub placement_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_objects: 3,
            min_size: 8,
            max_size: 12,
            palette: vec![
                PaletteColor::new("red", [220, 40, 40]),
                PaletteColor::new("green", [40, 170, 60]),
                PaletteColor::new("blue", [40, 80, 220]),
                PaletteColor::new("yellow", [240, 220, 40]),
                PaletteColor::new("purple", [140, 60, 190]),
                PaletteColor::new("orange", [250, 140, 20]),
                PaletteColor::new("cyan", [40, 210, 220]),
                PaletteColor::new("gray", [128, 128, 128]),
            ],
            templates: Templates::default(),
            color_question_fraction: 0.5,
            answer_cap: 0.4,
            train_size: 2000,
            val_size: 500,
            seed: 7,
            placement_retries: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Question-gated elementwise product of projected image features,
    /// followed by spatial attention pooling.
    Product,
    /// Ablation: answers from the question alone. Logits do not depend on
    /// the image, which isolates the language prior.
    QuestionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaConfig {
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub question_dim: usize,
    pub fused_dim: usize,
    /// Attention heads over the grid; must divide `fused_dim`.
    pub attention_heads: usize,
    pub fusion: Fusion,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 32, 32],
            conv_strides: vec![2, 2, 2, 1],
            question_dim: 64,
            fused_dim: 64,
            attention_heads: 4,
            fusion: Fusion::Product,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Encoder channels per level; depth is the length.
    pub channels: Vec<usize>,
    /// Number of language slices `m`; levels `0..m` are conditioned.
    /// `None` means one per level.
    pub language_slices: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            language_slices: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    /// Power iterations run once at construction so the persisted vectors
    /// start converged.
    pub warmup_power_iters: usize,
    /// Power iterations per training step.
    pub power_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 64],
            warmup_power_iters: 50,
            power_iters: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPolicy {
    /// M computed once per sample from the original image.
    Precompute,
    /// M recomputed at the start of every epoch (ablation).
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub vqa_epochs: usize,
    pub vqa_batch_size: usize,
    pub vqa_lr: f64,
    pub vqa_label_smoothing: f64,
    /// Re-render each training scene under a random palette permutation
    /// every epoch (question and answer follow the permutation).
    pub vqa_recolor: bool,
    pub cf_steps: usize,
    pub cf_batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    /// Adam moment decay for generator and discriminator (the VQA model
    /// uses 0.9 / 0.999).
    pub gan_beta1: f64,
    pub gan_beta2: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_flip: f64,
    pub attention_policy: AttentionPolicy,
    /// Steps between checkpoints (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            vqa_epochs: 20,
            vqa_batch_size: 32,
            vqa_lr: 2e-3,
            vqa_label_smoothing: 0.1,
            vqa_recolor: true,
            cf_steps: 500,
            cf_batch_size: 16,
            generator_lr: 2e-4,
            discriminator_lr: 2e-4,
            gan_beta1: 0.5,
            gan_beta2: 0.999,
            lambda_rec: 10.0,
            lambda_adv: 1.0,
            lambda_flip: 1.0,
            attention_policy: AttentionPolicy::Precompute,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Threshold on M for the thresholded overlap statistic.
    pub mass_threshold: f64,
    pub panel_margin: usize,
    pub overlay_opacity: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mass_threshold: 0.5,
            panel_margin: 4,
            overlay_opacity: 0.5,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = &self.data;
        if d.height < 32 || d.width < 32 {
            problems.push("data.height and data.width must be >= 32".to_string());
        }
        if d.max_objects == 0 {
            problems.push("data.max_objects must be >= 1".into());
        }
        if d.min_size == 0 || d.min_size > d.max_size {
            problems.push("data.min_size must be in 1..=data.max_size".into());
        }
        if 2 * d.max_size + 1 > d.height.min(d.width) {
            problems.push("data.max_size does not fit the image".into());
        }
        if d.palette.len() < 2 {
            problems.push("data.palette needs at least two colors".into());
        }
        if !d.templates.color.contains("{shape}") {
            problems.push("data.templates.color must contain {shape}".into());
        }
        if !d.templates.shape.contains("{color}") {
            problems.push("data.templates.shape must contain {color}".into());
        }
        if !(0.0..=1.0).contains(&d.color_question_fraction) {
            problems.push("data.color_question_fraction must be in [0, 1]".into());
        }
        if !(d.answer_cap > 0.0 && d.answer_cap <= 1.0) {
            problems.push("data.answer_cap must be in (0, 1]".into());
        }
        let v = &self.vqa;
        if v.conv_channels.is_empty() || v.conv_channels.len() != v.conv_strides.len() {
            problems.push("vqa.conv_channels and vqa.conv_strides must be nonempty and equal length".into());
        }
        if v.question_dim == 0 || v.fused_dim == 0 {
            problems.push("vqa dims must be positive".into());
        }
        if v.attention_heads == 0 || !v.fused_dim.is_multiple_of(v.attention_heads) {
            problems.push("vqa.attention_heads must divide vqa.fused_dim".into());
        }
        if self.generator.channels.is_empty() {
            problems.push("generator.channels must be nonempty".into());
        }
        if let Some(m) = self.generator.language_slices {
            if m == 0 || m > self.generator.channels.len() {
                problems.push("generator.language_slices must be in 1..=generator depth".into());
            }
        }
        if self.discriminator.channels.len() != 3 {
            problems.push("discriminator.channels must have exactly three entries".into());
        }
        let t = &self.train;
        for (name, rate) in [
            ("train.vqa_lr", t.vqa_lr),
            ("train.generator_lr", t.generator_lr),
            ("train.discriminator_lr", t.discriminator_lr),
        ] {
            if !(rate > 0.0 && rate.is_finite()) {
                problems.push(format!("{name} must be > 0"));
            }
        }
        if t.vqa_batch_size == 0 || t.cf_batch_size == 0 {
            problems.push("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.vqa_label_smoothing) {
            problems.push("train.vqa_label_smoothing must be in [0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Reads and validates a config file. Unknown keys are reported by name.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_toml_str(&text)
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&bytes))
}
