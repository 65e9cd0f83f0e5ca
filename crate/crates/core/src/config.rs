//! Model, ground-truth and training hyperparameters.
//!
//! Configs can be read from flat `key=value` files; blank lines and lines
//! starting with `#` are ignored. List values are comma separated and the
//! backbone stages are separated by `|`, e.g.
//! `backbone_channels = 64,64|128,128|256,256,256|512,512,512`.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Per-head σ from the mean distance to the nearest heads.
    #[default]
    Knn,
    /// One σ for every head.
    Fixed,
}

impl FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(SigmaMode::Knn),
            "fixed" => Ok(SigmaMode::Fixed),
            other => Err(Error::Config(format!("unknown sigma mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sparse: f64,
    pub dense: f64,
    pub final_map: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sparse: 1.0,
            dense: 1.0,
            final_map: 1.0,
            cls: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AugmentConfig {
    pub crops: bool,
    pub resize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdaNetConfig {
    /// Conv widths per backbone stage; a 2×2 max-pool separates stages.
    pub backbone_channels: Vec<Vec<usize>>,
    pub backbone_post_attention: bool,
    pub pfe_scales: Vec<usize>,
    pub pfe_reduced_channels: usize,
    pub dilation_rate: usize,
    pub dad_channels: Vec<usize>,
    pub knn_k: usize,
    pub beta: f64,
    pub sigma_fixed: f64,
    pub sigma_mode: SigmaMode,
    /// Count at or above which a scene is labelled dense. `None` means the
    /// median training count.
    pub class_threshold: Option<f64>,
    /// Smoothed density above which a pixel belongs to the dense target.
    /// `None` means 4 × the mean positive training density.
    pub region_threshold: Option<f64>,
    pub region_window: usize,
    pub loss: LossWeights,
    /// Scales every layer width except the single-channel heads.
    pub channel_multiplier: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub train: OptimConfig,
}

impl Default for PdaNetConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256], vec![512, 512, 512]],
            backbone_post_attention: true,
            pfe_scales: vec![2, 4, 8],
            pfe_reduced_channels: 32,
            dilation_rate: 2,
            dad_channels: vec![512, 256, 128, 128, 1],
            knn_k: 3,
            beta: 0.3,
            sigma_fixed: 15.0,
            sigma_mode: SigmaMode::Knn,
            class_threshold: None,
            region_threshold: None,
            region_window: 15,
            loss: LossWeights::default(),
            channel_multiplier: 1.0,
            seed: 0,
            augment: AugmentConfig::default(),
            train: OptimConfig::default(),
        }
    }
}

impl PdaNetConfig {
    /// Default architecture with every width scaled by `multiplier`.
    pub fn tiny(multiplier: f64) -> Self {
        Self {
            channel_multiplier: multiplier,
            ..Self::default()
        }
    }

    /// Layer width after applying the channel multiplier.
    pub fn width(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_multiplier).round() as usize).max(1)
    }

    /// Width of the backbone output (the last backbone conv).
    pub fn feature_channels(&self) -> usize {
        self.width(*self.backbone_channels.last().and_then(|s| s.last()).unwrap_or(&512))
    }

    /// Total downsampling of the backbone.
    pub fn output_stride(&self) -> usize {
        1 << self.backbone_channels.len().saturating_sub(1)
    }

    /// Input sides must be a multiple of this.
    pub fn input_multiple(&self) -> usize {
        self.output_stride() * 4
    }

    /// Smallest legal input side: the coarsest pyramid pool needs at least
    /// one cell per bin.
    pub fn min_input_side(&self) -> usize {
        let coarsest = self.pfe_scales.iter().copied().max().unwrap_or(4).max(4);
        let side = self.output_stride() * coarsest;
        side.div_ceil(self.input_multiple()) * self.input_multiple()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.backbone_channels.is_empty() || self.backbone_channels.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return bad("backbone_channels needs non-empty stages of positive widths");
        }
        if self.pfe_scales.is_empty() {
            return bad("pfe_scales must be non-empty");
        }
        if self.pfe_scales[0] < 2 || self.pfe_scales.windows(2).any(|w| w[1] <= w[0]) {
            return bad("pfe_scales must be strictly increasing and each >= 2");
        }
        if self.pfe_reduced_channels == 0 {
            return bad("pfe_reduced_channels must be positive");
        }
        if self.dad_channels.len() != 5 || self.dad_channels.last() != Some(&1) || self.dad_channels.contains(&0) {
            return bad("dad_channels must list five positive widths ending in 1");
        }
        if self.dilation_rate < 1 {
            return bad("dilation_rate must be >= 1");
        }
        if self.knn_k < 1 {
            return bad("knn_k must be >= 1");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if !(self.sigma_fixed > 0.0) {
            return bad("sigma_fixed must be > 0");
        }
        if matches!(self.class_threshold, Some(t) if !(t > 0.0)) {
            return bad("class_threshold must be > 0");
        }
        if matches!(self.region_threshold, Some(t) if !(t >= 0.0)) {
            return bad("region_threshold must be >= 0");
        }
        if self.region_window == 0 {
            return bad("region_window must be positive");
        }
        if !(self.channel_multiplier > 0.0 && self.channel_multiplier <= 1.0) {
            return bad("channel_multiplier must lie in (0, 1]");
        }
        let l = self.loss;
        if [l.sparse, l.dense, l.final_map, l.cls].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.train.lr >= 0.0) || !(self.train.eps > 0.0) {
            return bad("train.lr must be >= 0 and train.eps > 0");
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "backbone_channels" => {
                self.backbone_channels = value.split('|').map(parse_list).collect::<Result<_>>()?;
            }
            "backbone.post_attention" => self.backbone_post_attention = parse(key, value)?,
            "pfe_scales" => self.pfe_scales = parse_list(value)?,
            "pfe_reduced_channels" => self.pfe_reduced_channels = parse(key, value)?,
            "dilation_rate" => self.dilation_rate = parse(key, value)?,
            "dad_channels" => self.dad_channels = parse_list(value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "sigma_fixed" | "sigma" => self.sigma_fixed = parse(key, value)?,
            "sigma_mode" => self.sigma_mode = value.parse()?,
            "class_threshold" => self.class_threshold = parse_optional(key, value)?,
            "region_threshold" => self.region_threshold = parse_optional(key, value)?,
            "region_window" => self.region_window = parse(key, value)?,
            "loss.lambda_s" => self.loss.sparse = parse(key, value)?,
            "loss.lambda_d" => self.loss.dense = parse(key, value)?,
            "loss.lambda_f" => self.loss.final_map = parse(key, value)?,
            "loss.lambda_cls" => self.loss.cls = parse(key, value)?,
            "channel_multiplier" => self.channel_multiplier = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment.crops" => self.augment.crops = parse(key, value)?,
            "augment.resize" => self.augment.resize = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.eps" => self.train.eps = parse(key, value)?,
            "train.iterations" => self.train.iterations = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a `key=value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        config.apply_text(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Renders the config back into `key=value` lines.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        let stages = self.backbone_channels.iter().map(|s| join(s)).collect::<Vec<_>>().join("|");
        let sigma_mode = match self.sigma_mode {
            SigmaMode::Knn => "knn",
            SigmaMode::Fixed => "fixed",
        };
        [
            format!("backbone_channels={stages}"),
            format!("backbone.post_attention={}", self.backbone_post_attention),
            format!("pfe_scales={}", join(&self.pfe_scales)),
            format!("pfe_reduced_channels={}", self.pfe_reduced_channels),
            format!("dilation_rate={}", self.dilation_rate),
            format!("dad_channels={}", join(&self.dad_channels)),
            format!("knn_k={}", self.knn_k),
            format!("beta={}", self.beta),
            format!("sigma_fixed={}", self.sigma_fixed),
            format!("sigma_mode={sigma_mode}"),
            format!("class_threshold={}", opt(self.class_threshold)),
            format!("region_threshold={}", opt(self.region_threshold)),
            format!("region_window={}", self.region_window),
            format!("loss.lambda_s={}", self.loss.sparse),
            format!("loss.lambda_d={}", self.loss.dense),
            format!("loss.lambda_f={}", self.loss.final_map),
            format!("loss.lambda_cls={}", self.loss.cls),
            format!("channel_multiplier={}", self.channel_multiplier),
            format!("seed={}", self.seed),
            format!("augment.crops={}", self.augment.crops),
            format!("augment.resize={}", self.augment.resize),
            format!("train.lr={}", self.train.lr),
            format!("train.beta1={}", self.train.beta1),
            format!("train.beta2={}", self.train.beta2),
            format!("train.eps={}", self.train.eps),
            format!("train.iterations={}", self.train.iterations),
        ]
        .join("\n")
            + "\n"
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| parse("list", v))
        .collect()
}
