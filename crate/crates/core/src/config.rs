//! Training configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    DuplicateKey(String),
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("config key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Many-to-many token/prompt loss.
    Mtmc,
    /// One-to-one image/paragraph loss.
    Otoc,
    /// Sum of both.
    Both,
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mtmc" => Ok(Self::Mtmc),
            "otoc" => Ok(Self::Otoc),
            "both" => Ok(Self::Both),
            _ => Err(format!("expected mtmc, otoc or both, got `{s}`")),
        }
    }
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mtmc => "mtmc",
            Self::Otoc => "otoc",
            Self::Both => "both",
        }
    }

    pub fn uses_mtmc(self) -> bool {
        matches!(self, Self::Mtmc | Self::Both)
    }

    pub fn uses_otoc(self) -> bool {
        matches!(self, Self::Otoc | Self::Both)
    }
}

/// Architecture and masking switches. The token count comes from the
/// catalog (or is 1 in single-token mode).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub text_len: usize,
    pub paragraph_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub token_mask: bool,
    pub region_mask: bool,
    /// One shared attribute token for all groups.
    pub single_token: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    /// Random flip and erasing on training images.
    pub augment: bool,
    /// Evaluate on the test split every this many epochs; 0 disables.
    pub eval_every: usize,
}

pub const KEYS: [&str; 23] = [
    "height",
    "width",
    "patch",
    "dim",
    "layers",
    "heads",
    "text_len",
    "paragraph_len",
    "text_layers",
    "text_heads",
    "token_mask",
    "region_mask",
    "single_token",
    "loss",
    "lr",
    "weight_decay",
    "epochs",
    "batch_size",
    "tau",
    "seed",
    "augment",
    "eval_every",
    // the preset name is informational
    "name",
];

fn value<T: FromStr>(map: &IndexMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let raw = map.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))?;
    raw.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<(String, Self), ConfigError> {
        let mut map = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.to_string()));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(k.to_string()));
            }
        }
        // report the first missing key in canonical order
        for k in KEYS {
            if !map.contains_key(k) {
                return Err(ConfigError::MissingKey(k.to_string()));
            }
        }
        let model = ModelConfig {
            height: value(&map, "height")?,
            width: value(&map, "width")?,
            patch: value(&map, "patch")?,
            dim: value(&map, "dim")?,
            layers: value(&map, "layers")?,
            heads: value(&map, "heads")?,
            text_len: value(&map, "text_len")?,
            paragraph_len: value(&map, "paragraph_len")?,
            text_layers: value(&map, "text_layers")?,
            text_heads: value(&map, "text_heads")?,
            token_mask: value(&map, "token_mask")?,
            region_mask: value(&map, "region_mask")?,
            single_token: value(&map, "single_token")?,
        };
        let cfg = Self {
            model,
            loss: value(&map, "loss")?,
            lr: value(&map, "lr")?,
            weight_decay: value(&map, "weight_decay")?,
            epochs: value(&map, "epochs")?,
            batch_size: value(&map, "batch_size")?,
            tau: value(&map, "tau")?,
            seed: value(&map, "seed")?,
            augment: value(&map, "augment")?,
            eval_every: value(&map, "eval_every")?,
        };
        cfg.validate()?;
        Ok((map["name"].clone(), cfg))
    }

    pub fn load(path: &Path) -> Result<(String, Self), ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Value {
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        let m = &self.model;
        for (k, v) in [
            ("height", m.height),
            ("width", m.width),
            ("patch", m.patch),
            ("dim", m.dim),
            ("heads", m.heads),
            ("text_heads", m.text_heads),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if m.height % m.patch != 0 || m.width % m.patch != 0 {
            return bad("patch", "must divide height and width");
        }
        if m.dim % m.heads != 0 || m.dim % m.text_heads != 0 {
            return bad("dim", "must be divisible by heads and text_heads");
        }
        if m.text_len < 3 || m.paragraph_len < 3 {
            return bad("text_len", "sequence lengths must be at least 3");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        Ok(())
    }

    /// Canonical file text; parsing it yields `self` again.
    pub fn to_conf_string(&self, name: &str) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("name", name.to_string());
        put("height", m.height.to_string());
        put("width", m.width.to_string());
        put("patch", m.patch.to_string());
        put("dim", m.dim.to_string());
        put("layers", m.layers.to_string());
        put("heads", m.heads.to_string());
        put("text_len", m.text_len.to_string());
        put("paragraph_len", m.paragraph_len.to_string());
        put("text_layers", m.text_layers.to_string());
        put("text_heads", m.text_heads.to_string());
        put("token_mask", m.token_mask.to_string());
        put("region_mask", m.region_mask.to_string());
        put("single_token", m.single_token.to_string());
        put("loss", self.loss.as_str().to_string());
        put("lr", format!("{:?}", self.lr));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("tau", format!("{:?}", self.tau));
        put("seed", self.seed.to_string());
        put("augment", self.augment.to_string());
        put("eval_every", self.eval_every.to_string());
        s
    }

    /// SHA-256 of the canonical form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_conf_string("").as_bytes()))
    }

    /// Small-scale defaults: 32×32 images, 8-pixel patches, D = 32.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                height: 32,
                width: 32,
                patch: 8,
                dim: 32,
                layers: 2,
                heads: 2,
                text_len: 64,
                paragraph_len: 448,
                text_layers: 2,
                text_heads: 2,
                token_mask: true,
                region_mask: true,
                single_token: false,
            },
            loss: LossMode::Mtmc,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
            tau: 0.1,
            seed: 0,
            augment: false,
            eval_every: 5,
        }
    }
}
