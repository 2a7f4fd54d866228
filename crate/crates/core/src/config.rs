//! Architecture and training hyperparameters, plus the `key = value` text
//! format used by config files, checkpoints and run manifests.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterMode {
    None,
    Standard,
    MmAdapter,
}

impl FromStr for AdapterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "standard" => Ok(Self::Standard),
            "mmadapter" => Ok(Self::MmAdapter),
            _ => Err(Error::Config(format!("unknown adapter mode `{s}` (none|standard|mmadapter)"))),
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Standard => "standard",
            Self::MmAdapter => "mmadapter",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Optical raster only; the elevation branch is not built.
    Optical,
    /// Optical and elevation branches.
    Both,
}

impl Modality {
    pub fn branches(self) -> usize {
        match self {
            Self::Optical => 1,
            Self::Both => 2,
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "optical" => Ok(Self::Optical),
            "both" | "optical+dsm" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown modality `{s}` (optical|both)"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Optical => "optical",
            Self::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn vit_b() -> Self {
        Self { image_size: 1024, patch_size: 16, embed_dim: 768, depth: 12, heads: 12, mlp_ratio: 4.0 }
    }

    pub fn vit_l() -> Self {
        Self { image_size: 1024, patch_size: 16, embed_dim: 1024, depth: 24, heads: 16, mlp_ratio: 4.0 }
    }

    pub fn vit_h() -> Self {
        Self { image_size: 1024, patch_size: 16, embed_dim: 1280, depth: 32, heads: 16, mlp_ratio: 4.0 }
    }

    pub fn toy() -> Self {
        Self { image_size: 64, patch_size: 16, embed_dim: 32, depth: 2, heads: 4, mlp_ratio: 4.0 }
    }

    /// Token grid extent per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    pub adapter_bias: bool,
    pub adapter: AdapterMode,
    pub modality: Modality,
    pub dfm: bool,
    pub classes: usize,
    pub decoder_width: usize,
    /// Channels of the pyramid outputs at scales 1/4, 1/8, 1/16, 1/32.
    pub pyramid_channels: [usize; 4],
    pub se_reduction: usize,
}

impl ModelConfig {
    pub fn from_encoder(encoder: EncoderConfig) -> Self {
        let c = encoder.embed_dim;
        Self {
            bottleneck: (c / 4).max(1),
            adapter_bias: true,
            adapter: AdapterMode::MmAdapter,
            modality: Modality::Both,
            dfm: true,
            classes: 6,
            decoder_width: c.min(256),
            pyramid_channels: [(c / 4).max(1), (c / 2).max(1), c, c],
            se_reduction: 4,
            encoder,
        }
    }

    pub fn toy() -> Self {
        Self::from_encoder(EncoderConfig::toy())
    }

    pub fn vit_b() -> Self {
        Self::from_encoder(EncoderConfig::vit_b())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = self.encoder.embed_dim;
        if self.bottleneck == 0 || self.bottleneck >= c {
            return Err(Error::Config(format!("bottleneck {} must be in [1, {c})", self.bottleneck)));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.adapter == AdapterMode::MmAdapter && self.modality == Modality::Optical {
            return Err(Error::Config("mmadapter needs both modalities".into()));
        }
        if self.decoder_width == 0 || self.pyramid_channels.contains(&0) || self.se_reduction == 0 {
            return Err(Error::Config("decoder/pyramid widths and se_reduction must be positive".into()));
        }
        if !self.encoder.grid().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "token grid {} must be even (image_size divisible by 32)",
                self.encoder.grid()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stride of the training tiler; equal to the window means no overlap.
    pub train_stride: usize,
    /// Stride of the sliding-window evaluation.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 10,
            epochs: 30,
            seed: 0,
            train_stride: 256,
            eval_stride: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model plus training settings; the unit stored in config files.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("toy").expect("toy preset")
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    /// `toy` (64 px tiles, c=32, depth 2) or the `vit-b`/`vit-l`/`vit-h` encoders.
    pub fn preset(name: &str) -> Result<Self> {
        let (encoder, train) = match name.to_ascii_lowercase().as_str() {
            "toy" => (
                EncoderConfig::toy(),
                TrainConfig { batch_size: 4, train_stride: 64, eval_stride: 32, ..TrainConfig::default() },
            ),
            "vit-b" => (EncoderConfig::vit_b(), TrainConfig::default()),
            "vit-l" => (EncoderConfig::vit_l(), TrainConfig::default()),
            "vit-h" => (EncoderConfig::vit_h(), TrainConfig { batch_size: 6, ..TrainConfig::default() }),
            _ => return Err(Error::Config(format!("unknown preset `{name}` (toy|vit-b|vit-l|vit-h)"))),
        };
        Ok(Self { model: ModelConfig::from_encoder(encoder), train })
    }

    /// Applies one `key = value` setting. Changing `embed_dim` re-derives the
    /// widths that default from it, so set those afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" => *self = Self::preset(value)?,
            "image_size" => m.encoder.image_size = parse(key, value)?,
            "patch_size" => m.encoder.patch_size = parse(key, value)?,
            "embed_dim" => {
                let c: usize = parse(key, value)?;
                let enc = EncoderConfig { embed_dim: c, ..m.encoder.clone() };
                let keep = m.clone();
                *m = ModelConfig::from_encoder(enc);
                m.adapter = keep.adapter;
                m.modality = keep.modality;
                m.dfm = keep.dfm;
                m.classes = keep.classes;
                m.adapter_bias = keep.adapter_bias;
                m.se_reduction = keep.se_reduction;
            }
            "depth" => m.encoder.depth = parse(key, value)?,
            "heads" => m.encoder.heads = parse(key, value)?,
            "mlp_ratio" => m.encoder.mlp_ratio = parse(key, value)?,
            "bottleneck" => m.bottleneck = parse(key, value)?,
            "adapter_bias" => m.adapter_bias = parse_bool(key, value)?,
            "adapter" => m.adapter = value.parse()?,
            "modality" => m.modality = value.parse()?,
            "dfm" => m.dfm = parse_bool(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "decoder_width" => m.decoder_width = parse(key, value)?,
            "pyramid_channels" => {
                let parts: Vec<usize> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                m.pyramid_channels =
                    parts.try_into().map_err(|_| Error::Config("pyramid_channels needs exactly 4 values".into()))?;
            }
            "se_reduction" => m.se_reduction = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "train_stride" => t.train_stride = parse(key, value)?,
            "eval_stride" => t.eval_stride = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the toy preset. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Model fields only, canonical order.
    pub fn model_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let pc = m.pyramid_channels;
        format!(
            "image_size = {}\npatch_size = {}\nembed_dim = {}\ndepth = {}\nheads = {}\nmlp_ratio = {}\n\
             bottleneck = {}\nadapter_bias = {}\nadapter = {}\nmodality = {}\ndfm = {}\nclasses = {}\n\
             decoder_width = {}\npyramid_channels = {},{},{},{}\nse_reduction = {}\n",
            e.image_size,
            e.patch_size,
            e.embed_dim,
            e.depth,
            e.heads,
            e.mlp_ratio,
            m.bottleneck,
            m.adapter_bias,
            m.adapter,
            m.modality,
            m.dfm,
            m.classes,
            m.decoder_width,
            pc[0],
            pc[1],
            pc[2],
            pc[3],
            m.se_reduction
        )
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        format!(
            "{}lr = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n\
             train_stride = {}\neval_stride = {}\n",
            self.model_text(),
            t.lr,
            t.momentum,
            t.weight_decay,
            t.batch_size,
            t.epochs,
            t.seed,
            t.train_stride,
            t.eval_stride
        )
    }
}
