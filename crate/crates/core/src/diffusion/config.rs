//! Model and training configuration, read from flat `key = value` files.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// `Z_text + Σ Z_img`.
    Uniform,
    /// Relevance-weighted image streams.
    Weighted,
    /// Relevance-weighted image streams and a gated text stream.
    Trained,
    /// Gated text stream, unweighted image streams.
    TextWeight,
}

impl MergeMode {
    pub const ALL: [MergeMode; 4] = [
        MergeMode::Uniform,
        MergeMode::Weighted,
        MergeMode::Trained,
        MergeMode::TextWeight,
    ];

    pub fn uses_relevance(self) -> bool {
        matches!(self, MergeMode::Weighted | MergeMode::Trained)
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, MergeMode::Trained | MergeMode::TextWeight)
    }

    pub fn code(self) -> u32 {
        match self {
            MergeMode::Uniform => 0,
            MergeMode::Weighted => 1,
            MergeMode::Trained => 2,
            MergeMode::TextWeight => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Uniform => "uniform",
            MergeMode::Weighted => "weighted",
            MergeMode::Trained => "trained",
            MergeMode::TextWeight => "text",
        })
    }
}

impl FromStr for MergeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MergeMode::Uniform),
            "weighted" => Ok(MergeMode::Weighted),
            "trained" => Ok(MergeMode::Trained),
            "text" => Ok(MergeMode::TextWeight),
            _ => Err(Error::config(format!(
                "merge_mode must be uniform|weighted|trained|text, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Finetune => "finetune",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "finetune" => Ok(TrainMode::Finetune),
            _ => Err(Error::config(format!(
                "mode must be pretrain|finetune, got {s:?}"
            ))),
        }
    }
}

/// Whether the conditioning prompt keeps color words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptStyle {
    /// "a red circle and a blue square"; object texts "red circle", ...
    Full,
    /// "a circle and a square"; object texts "circle", ...; color comes only
    /// from the reference images.
    Shape,
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptStyle::Full => "full",
            PromptStyle::Shape => "shape",
        })
    }
}

impl FromStr for PromptStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PromptStyle::Full),
            "shape" => Ok(PromptStyle::Shape),
            _ => Err(Error::config(format!(
                "prompt_style must be full|shape, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub dim: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub clip_dim: usize,
    pub image_tokens: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub max_text_len: usize,
    pub vocab: usize,
    pub timesteps: usize,
    pub merge_mode: MergeMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            latent_channels: 12,
            dim: 64,
            text_dim: 32,
            image_dim: 24,
            clip_dim: 24,
            image_tokens: 2,
            layers: 4,
            mlp_hidden: 128,
            time_dim: 32,
            max_text_len: 16,
            vocab: super::text::vocab_size(),
            timesteps: 1000,
            merge_mode: MergeMode::Uniform,
        }
    }
}

impl ModelConfig {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("height", self.height),
            ("width", self.width),
            ("latent_channels", self.latent_channels),
            ("dim", self.dim),
            ("text_dim", self.text_dim),
            ("image_dim", self.image_dim),
            ("clip_dim", self.clip_dim),
            ("image_tokens", self.image_tokens),
            ("layers", self.layers),
            ("mlp_hidden", self.mlp_hidden),
            ("max_text_len", self.max_text_len),
            ("vocab", self.vocab),
            ("timesteps", self.timesteps),
        ];
        for (k, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be a positive even number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: TrainMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub p_drop_text: f64,
    pub p_drop_image: f64,
    pub p_drop_both: f64,
    pub prompt_style: PromptStyle,
    pub max_refs: usize,
    pub seed: u64,
    pub log_every: usize,
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: TrainMode::Pretrain,
            lr: 1e-4,
            weight_decay: 0.01,
            steps: 1000,
            batch: 4,
            p_drop_text: 0.05,
            p_drop_image: 0.05,
            p_drop_both: 0.05,
            prompt_style: PromptStyle::Shape,
            max_refs: 4,
            seed: 0,
            log_every: 50,
            ckpt_every: 1000,
        }
    }
}

/// Documented keys with their defaults, in echo order.
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("height", "latent grid rows (8)"),
    ("width", "latent grid columns (8)"),
    ("latent_channels", "channels per latent position (12)"),
    ("dim", "model width D (64)"),
    ("text_dim", "text feature width D_text (32)"),
    ("image_dim", "image feature width D_img (24)"),
    ("clip_dim", "embedder output width (24)"),
    ("image_tokens", "feature tokens per reference image (2)"),
    ("layers", "denoiser blocks (4)"),
    ("mlp_hidden", "MLP hidden width (128)"),
    ("time_dim", "sinusoidal time features, even (32)"),
    ("max_text_len", "longest prompt in tokens (16)"),
    ("timesteps", "diffusion steps T (1000)"),
    (
        "merge_mode",
        "uniform | weighted | trained | text (uniform)",
    ),
    ("mode", "pretrain | finetune (pretrain)"),
    ("lr", "AdamW learning rate (1e-4)"),
    ("weight_decay", "AdamW decoupled weight decay (0.01)"),
    ("steps", "optimizer steps (1000)"),
    ("batch", "examples per step (4)"),
    ("p_drop_text", "text dropout probability (0.05)"),
    ("p_drop_image", "image dropout probability (0.05)"),
    ("p_drop_both", "joint dropout probability (0.05)"),
    ("prompt_style", "full | shape (shape)"),
    ("max_refs", "largest number of reference images (4)"),
    ("seed", "root seed (0)"),
    ("log_every", "loss log interval in steps (50)"),
    ("ckpt_every", "checkpoint interval in steps (1000)"),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_prob(key: &str, value: &str) -> Result<f64> {
    let p: f64 = parse_num(key, value)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("{key} must lie in [0, 1], got {p}")));
    }
    Ok(p)
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "height" => m.height = parse_num(key, value)?,
            "width" => m.width = parse_num(key, value)?,
            "latent_channels" => m.latent_channels = parse_num(key, value)?,
            "dim" => m.dim = parse_num(key, value)?,
            "text_dim" => m.text_dim = parse_num(key, value)?,
            "image_dim" => m.image_dim = parse_num(key, value)?,
            "clip_dim" => m.clip_dim = parse_num(key, value)?,
            "image_tokens" => m.image_tokens = parse_num(key, value)?,
            "layers" => m.layers = parse_num(key, value)?,
            "mlp_hidden" => m.mlp_hidden = parse_num(key, value)?,
            "time_dim" => m.time_dim = parse_num(key, value)?,
            "max_text_len" => m.max_text_len = parse_num(key, value)?,
            "timesteps" => m.timesteps = parse_num(key, value)?,
            "merge_mode" => m.merge_mode = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "p_drop_text" => self.p_drop_text = parse_prob(key, value)?,
            "p_drop_image" => self.p_drop_image = parse_prob(key, value)?,
            "p_drop_both" => self.p_drop_both = parse_prob(key, value)?,
            "prompt_style" => self.prompt_style = value.parse()?,
            "max_refs" => self.max_refs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            "ckpt_every" => self.ckpt_every = parse_num(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.max_refs == 0 {
            return Err(Error::config("max_refs must be positive"));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "latent_channels" => m.latent_channels.to_string(),
            "dim" => m.dim.to_string(),
            "text_dim" => m.text_dim.to_string(),
            "image_dim" => m.image_dim.to_string(),
            "clip_dim" => m.clip_dim.to_string(),
            "image_tokens" => m.image_tokens.to_string(),
            "layers" => m.layers.to_string(),
            "mlp_hidden" => m.mlp_hidden.to_string(),
            "time_dim" => m.time_dim.to_string(),
            "max_text_len" => m.max_text_len.to_string(),
            "timesteps" => m.timesteps.to_string(),
            "merge_mode" => m.merge_mode.to_string(),
            "mode" => self.mode.to_string(),
            "lr" => format!("{:e}", self.lr),
            "weight_decay" => self.weight_decay.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "p_drop_text" => self.p_drop_text.to_string(),
            "p_drop_image" => self.p_drop_image.to_string(),
            "p_drop_both" => self.p_drop_both.to_string(),
            "prompt_style" => self.prompt_style.to_string(),
            "max_refs" => self.max_refs.to_string(),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            _ => unreachable!("undocumented key {key}"),
        }
    }

    /// Every documented key with its effective value; parses back to `self`.
    pub fn to_kv(&self) -> String {
        TRAIN_KEYS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }
}
