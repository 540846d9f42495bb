//! Flat `key = value` configuration covering every tunable of the pipeline.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::ConfigError;
use crate::fusion::FusionStrategy;
use crate::sim::VocStructure;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    AdamW,
}

impl FromStr for Optimizer {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::AdamW => "adamw",
        })
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero over `epochs`.
    Cosine,
}

impl LrSchedule {
    /// Multiplier of the base learning rate during `epoch` (1-based) of `epochs`.
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                let progress = epoch.saturating_sub(1) as f64 / epochs.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub d_model: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub num_queries: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_voc_layers: usize,
    pub voc_structure: VocStructure,
    pub fusion_strategy: FusionStrategy,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_con: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub temporal_fraction: f64,
    pub shapes_per_scene: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d_model: 64,
            text_dim: 64,
            heads: 4,
            ffn_dim: 128,
            text_layers: 2,
            num_queries: 20,
            frames: 8,
            height: 64,
            width: 64,
            num_encoder_layers: 3,
            num_decoder_layers: 3,
            num_voc_layers: 3,
            voc_structure: VocStructure::Both,
            fusion_strategy: FusionStrategy::Both,
            lambda_cls: 2.0,
            lambda_l1: 2.0,
            lambda_giou: 2.0,
            lambda_dice: 2.0,
            lambda_focal: 5.0,
            lambda_con: 1.0,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 0.0,
            grad_clip: 1.0,
            epochs: 10,
            seed: 0,
            n_train: 200,
            n_val: 50,
            temporal_fraction: 0.5,
            shapes_per_scene: 3,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "d_model",
    "text_dim",
    "heads",
    "ffn_dim",
    "text_layers",
    "num_queries",
    "frames",
    "height",
    "width",
    "num_encoder_layers",
    "num_decoder_layers",
    "num_voc_layers",
    "voc_structure",
    "fusion_strategy",
    "lambda_cls",
    "lambda_l1",
    "lambda_giou",
    "lambda_dice",
    "lambda_focal",
    "lambda_con",
    "optimizer",
    "learning_rate",
    "lr_schedule",
    "weight_decay",
    "grad_clip",
    "epochs",
    "seed",
    "n_train",
    "n_val",
    "temporal_fraction",
    "shapes_per_scene",
    "data_dir",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() })
}

impl Config {
    /// The full-scale training preset: AdamW at 1e-4.
    pub fn full_scale_preset() -> Self {
        Self { optimizer: Optimizer::AdamW, learning_rate: 1e-4, weight_decay: 5e-4, ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "text_dim" => self.text_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "text_layers" => self.text_layers = parse(key, value)?,
            "num_queries" => self.num_queries = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "num_encoder_layers" => self.num_encoder_layers = parse(key, value)?,
            "num_decoder_layers" => self.num_decoder_layers = parse(key, value)?,
            "num_voc_layers" => self.num_voc_layers = parse(key, value)?,
            "voc_structure" => self.voc_structure = parse(key, value)?,
            "fusion_strategy" => self.fusion_strategy = parse(key, value)?,
            "lambda_cls" => self.lambda_cls = parse(key, value)?,
            "lambda_l1" => self.lambda_l1 = parse(key, value)?,
            "lambda_giou" => self.lambda_giou = parse(key, value)?,
            "lambda_dice" => self.lambda_dice = parse(key, value)?,
            "lambda_focal" => self.lambda_focal = parse(key, value)?,
            "lambda_con" => self.lambda_con = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_val" => self.n_val = parse(key, value)?,
            "temporal_fraction" => self.temporal_fraction = parse(key, value)?,
            "shapes_per_scene" => self.shapes_per_scene = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are rejected.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: lineno + 1, text: raw.to_string() })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, why: &str| Err(ConfigError::Invalid { key: key.to_string(), reason: why.to_string() });
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return invalid("d_model", "must be a positive multiple of heads");
        }
        if self.text_dim % self.heads != 0 {
            return invalid("text_dim", "must be a multiple of heads");
        }
        if self.height == 0 || self.height % 32 != 0 {
            return invalid("height", "must be a positive multiple of 32");
        }
        if self.width == 0 || self.width % 32 != 0 {
            return invalid("width", "must be a positive multiple of 32");
        }
        if self.frames == 0 {
            return invalid("frames", "must be at least 1");
        }
        if self.num_queries == 0 {
            return invalid("num_queries", "must be at least 1");
        }
        if self.shapes_per_scene == 0 {
            return invalid("shapes_per_scene", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.temporal_fraction) {
            return invalid("temporal_fraction", "must lie in [0, 1]");
        }
        let lambdas = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("lambda_dice", self.lambda_dice),
            ("lambda_focal", self.lambda_focal),
            ("lambda_con", self.lambda_con),
        ];
        for (key, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(key, "loss weights must be finite and non-negative");
            }
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning_rate", "must be positive");
        }
        Ok(())
    }

    /// Serializes every key, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "d_model" => self.d_model.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "text_layers" => self.text_layers.to_string(),
            "num_queries" => self.num_queries.to_string(),
            "frames" => self.frames.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "num_encoder_layers" => self.num_encoder_layers.to_string(),
            "num_decoder_layers" => self.num_decoder_layers.to_string(),
            "num_voc_layers" => self.num_voc_layers.to_string(),
            "voc_structure" => self.voc_structure.to_string(),
            "fusion_strategy" => self.fusion_strategy.to_string(),
            "lambda_cls" => self.lambda_cls.to_string(),
            "lambda_l1" => self.lambda_l1.to_string(),
            "lambda_giou" => self.lambda_giou.to_string(),
            "lambda_dice" => self.lambda_dice.to_string(),
            "lambda_focal" => self.lambda_focal.to_string(),
            "lambda_con" => self.lambda_con.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "temporal_fraction" => self.temporal_fraction.to_string(),
            "shapes_per_scene" => self.shapes_per_scene.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("value_of called with unknown key {key}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = Config::default();
        assert_eq!(c.num_queries, 20);
        assert_eq!(c.frames, 8);
        assert_eq!((c.num_encoder_layers, c.num_decoder_layers, c.num_voc_layers), (3, 3, 3));
        assert_eq!(
            (c.lambda_cls, c.lambda_l1, c.lambda_giou, c.lambda_dice, c.lambda_focal, c.lambda_con),
            (2.0, 2.0, 2.0, 2.0, 5.0, 1.0)
        );
        assert_eq!((c.height, c.width), (64, 64));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse_str("d_model = 32\nbogus_key = 1\n").unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "bogus_key"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.voc_structure = VocStructure::EncoderOnly;
        c.fusion_strategy = FusionStrategy::L2V;
        c.lambda_con = 0.0;
        c.lr_schedule = LrSchedule::Constant;
        c.data_dir = PathBuf::from("/tmp/some dir");
        assert_eq!(Config::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_validation() {
        let c = Config::parse_str("# header\nheads = 2 # trailing\n\nd_model = 8\ntext_dim = 8\n").unwrap();
        assert_eq!((c.heads, c.d_model), (2, 8));
        assert!(Config::parse_str("height = 48").is_err());
        assert!(Config::parse_str("d_model = 30").is_err());
        assert!(Config::parse_str("lambda_con = -1").is_err());
        assert!(matches!(Config::parse_str("epochs"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(Config::parse_str("epochs = many"), Err(ConfigError::InvalidValue { .. })));
    }

    #[test]
    fn cosine_schedule_starts_at_one_and_decays() {
        assert_eq!(LrSchedule::Cosine.factor(1, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(6, 10) - 0.5).abs() < 1e-12);
        assert!(LrSchedule::Cosine.factor(10, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
    }
}
