//! Model and training configuration, plus the flat key=value config file
//! format (`#` starts a comment, one `key = value` per line).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}` as {want}")]
    BadValue { key: String, value: String, want: &'static str },
    #[error("invalid config: {0}")]
    Constraint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Architecture hyperparameters.
///
/// `feat_dim` is the image-feature channel count, `patch_dim` the cost-map
/// patch channel count, `tokens`/`token_dim` the latent summary size per
/// pixel, `context_dim` the GRU state width, `window` the local attention
/// group size.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub patch_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub context_dim: usize,
    pub agt_depth: usize,
    pub window: usize,
    pub heads_override: Option<usize>,
    pub iters_train: usize,
    pub iters_eval: usize,
    pub gamma: f64,
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            feat_dim: 32,
            patch_dim: 16,
            tokens: 4,
            token_dim: 32,
            context_dim: 32,
            agt_depth: 1,
            window: 2,
            heads_override: None,
            iters_train: 6,
            iters_eval: 12,
            gamma: 0.8,
            seed: 0,
            precision: Precision::F32,
            deterministic: true,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            feat_dim: 256,
            patch_dim: 64,
            tokens: 8,
            token_dim: 128,
            context_dim: 128,
            agt_depth: 3,
            window: 2,
            heads_override: None,
            iters_train: 12,
            iters_eval: 24,
            gamma: 0.8,
            seed: 0,
            precision: Precision::F32,
            deterministic: true,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads_override.unwrap_or_else(|| (self.token_dim / 32).max(1))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Constraint(msg.to_string()))
            }
        };
        c(self.feat_dim % 4 == 0 && self.feat_dim > 0, "feat_dim must be a positive multiple of 4")?;
        c(self.patch_dim % 4 == 0 && self.patch_dim > 0, "patch_dim must be a positive multiple of 4")?;
        c(self.tokens > 0, "tokens must be positive")?;
        c(self.token_dim % 4 == 0 && self.token_dim > 0, "token_dim must be a positive multiple of 4")?;
        c(self.token_dim % self.heads() == 0, "token_dim must be divisible by heads")?;
        c(self.context_dim > 0, "context_dim must be positive")?;
        c(self.window >= 1, "window must be at least 1")?;
        c(self.iters_train >= 1 && self.iters_eval >= 1, "iteration counts must be at least 1")?;
        c(self.gamma > 0.0 && self.gamma <= 1.0, "gamma must be in (0, 1]")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Affine,
    SmoothRandom,
}

impl FromStr for SampleKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "affine" => Ok(SampleKind::Affine),
            "smooth_random" => Ok(SampleKind::SmoothRandom),
            _ => Err(()),
        }
    }
}

/// Training-run settings read from the same config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub kind: SampleKind,
    pub samples: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub magnitude: f64,
    /// Stop early once train AEPE falls below this (0 disables).
    pub target_aepe: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            lr: 2e-3,
            kind: SampleKind::SmoothRandom,
            samples: 1,
            image_h: 64,
            image_w: 64,
            magnitude: 3.0,
            target_aepe: 0.0,
        }
    }
}

/// Parses the flat key=value format. Later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take<V: FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    want: &'static str,
    out: &mut V,
) -> Result<(), ConfigError> {
    if let Some(v) = map.remove(key) {
        *out = v
            .parse::<V>()
            .map_err(|_| ConfigError::BadValue { key: key.to_string(), value: v, want })?;
    }
    Ok(())
}

/// Builds the model and training configs from file text. The optional
/// `preset` key (`toy` | `full`) picks the baseline; everything else
/// overrides single fields.
pub fn from_text(text: &str) -> Result<(ModelConfig, TrainConfig), ConfigError> {
    let mut map = parse_kv(text)?;
    let mut cfg = match map.remove("preset").as_deref() {
        None | Some("toy") => ModelConfig::toy(),
        Some("full") => ModelConfig::full(),
        Some(other) => {
            return Err(ConfigError::BadValue {
                key: "preset".into(),
                value: other.into(),
                want: "toy|full",
            })
        }
    };
    take(&mut map, "feat_dim", "integer", &mut cfg.feat_dim)?;
    take(&mut map, "patch_dim", "integer", &mut cfg.patch_dim)?;
    take(&mut map, "tokens", "integer", &mut cfg.tokens)?;
    take(&mut map, "token_dim", "integer", &mut cfg.token_dim)?;
    take(&mut map, "context_dim", "integer", &mut cfg.context_dim)?;
    take(&mut map, "agt_depth", "integer", &mut cfg.agt_depth)?;
    take(&mut map, "window", "integer", &mut cfg.window)?;
    take(&mut map, "iters_train", "integer", &mut cfg.iters_train)?;
    take(&mut map, "iters_eval", "integer", &mut cfg.iters_eval)?;
    take(&mut map, "gamma", "float", &mut cfg.gamma)?;
    take(&mut map, "seed", "integer", &mut cfg.seed)?;
    if let Some(v) = map.remove("heads") {
        let h = v.parse::<usize>().map_err(|_| ConfigError::BadValue {
            key: "heads".into(),
            value: v,
            want: "integer",
        })?;
        cfg.heads_override = Some(h);
    }
    if let Some(v) = map.remove("precision") {
        cfg.precision = v.parse().map_err(|_| ConfigError::BadValue {
            key: "precision".into(),
            value: v,
            want: "f32|f64",
        })?;
    }
    take(&mut map, "deterministic", "true|false", &mut cfg.deterministic)?;

    let mut train = TrainConfig::default();
    take(&mut map, "steps", "integer", &mut train.steps)?;
    take(&mut map, "lr", "float", &mut train.lr)?;
    take(&mut map, "samples", "integer", &mut train.samples)?;
    take(&mut map, "image_h", "integer", &mut train.image_h)?;
    take(&mut map, "image_w", "integer", &mut train.image_w)?;
    take(&mut map, "magnitude", "float", &mut train.magnitude)?;
    take(&mut map, "target_aepe", "float", &mut train.target_aepe)?;
    if let Some(v) = map.remove("kind") {
        train.kind = v.parse().map_err(|_| ConfigError::BadValue {
            key: "kind".into(),
            value: v,
            want: "affine|smooth_random",
        })?;
    }

    if let Some(key) = map.into_keys().next() {
        return Err(ConfigError::UnknownKey(key));
    }
    cfg.validate()?;
    Ok((cfg, train))
}

pub fn from_file(path: &Path) -> Result<(ModelConfig, TrainConfig), ConfigError> {
    from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_and_full_defaults_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert_eq!(ModelConfig::toy().heads(), 1);
        assert_eq!(ModelConfig::full().heads(), 4);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "\
# architecture
preset = toy
token_dim = 64   # wider tokens
seed=9

steps = 25
kind = affine
";
        let (cfg, train) = from_text(text).unwrap();
        assert_eq!(cfg.token_dim, 64);
        assert_eq!(cfg.heads(), 2);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.feat_dim, 32);
        assert_eq!(train.steps, 25);
        assert_eq!(train.kind, SampleKind::Affine);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(from_text("tokn_dim = 4"), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn bad_value_names_key_and_value() {
        let err = from_text("gamma = often").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gamma") && msg.contains("often"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = from_text("preset = toy\nnot a pair\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn constraints_are_enforced() {
        assert!(from_text("patch_dim = 18").is_err());
        assert!(from_text("gamma = 0").is_err());
        assert!(from_text("heads = 5").is_err()); // 32 % 5 != 0
        assert!(from_text("iters_train = 0").is_err());
    }

    #[test]
    fn precision_round_trips() {
        let (cfg, _) = from_text("precision = f64").unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.precision.to_string(), "f64");
    }
}
