//! Flat `key = value` run configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Text(&'static [&'static str]),
    FloatList,
    UintList,
    TextList(&'static [&'static str]),
    Path,
}

const SCHEMA: &[(&str, Kind)] = &[
    ("seed", Kind::Uint),
    ("sde.kind", Kind::Text(&["ve", "vp", "subvp"])),
    ("sde.sigma_min", Kind::Float),
    ("sde.sigma_max", Kind::Float),
    ("sde.beta_min", Kind::Float),
    ("sde.beta_max", Kind::Float),
    ("sde.steps", Kind::Uint),
    ("sde.epsilon", Kind::Float),
    ("data.kind", Kind::Text(&["toy", "textures", "manifest"])),
    ("data.n_train", Kind::Uint),
    ("data.n_test", Kind::Uint),
    ("data.height", Kind::Uint),
    ("data.width", Kind::Uint),
    ("data.defects", Kind::TextList(&["rect", "rectangle", "ellipse"])),
    ("data.manifest", Kind::Path),
    ("net.arch", Kind::Text(&["mlp", "conv"])),
    ("net.hidden", Kind::Uint),
    ("net.depth", Kind::Uint),
    ("net.channels", Kind::Uint),
    ("net.n_freqs", Kind::Uint),
    ("net.fourier_scale", Kind::Float),
    ("net.precond", Kind::Text(&["sigma", "none"])),
    ("train.steps", Kind::Uint),
    ("train.batch", Kind::Uint),
    ("train.lr", Kind::Float),
    ("train.beta1", Kind::Float),
    ("train.beta2", Kind::Float),
    ("train.weighting", Kind::Text(&["sigma2", "unit"])),
    ("train.checkpoint_every", Kind::Uint),
    ("train.warn_loss", Kind::Float),
    ("detect.t_set", Kind::FloatList),
    ("detect.r", Kind::Uint),
    ("detect.mode", Kind::Text(&["ode", "sde"])),
    ("detect.layers", Kind::UintList),
    (
        "detect.combine",
        Kind::Text(&["feature_product", "score_diff", "recon_loss"]),
    ),
    ("detect.schedule", Kind::Text(&["scales", "continuous"])),
    ("sample.mode", Kind::Text(&["ode", "sde"])),
    ("checkpoint", Kind::Path),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("line {} is not `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Insert or override one key after checking it against the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let kind = SCHEMA
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, kind)| *kind)
            .ok_or_else(|| err(key, "unknown key"))?;
        check(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(kv, "override must be `key=value`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key).ok_or_else(|| err(key, "required but missing"))
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| err(key, format!("cannot parse {v:?}"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        self.raw(key)
            .map(|v| {
                split_list(v)
                    .map(|item| {
                        item.parse()
                            .map_err(|_| err(key, format!("cannot parse list item {item:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// A path value, resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    /// Every path-valued key must point at an existing file.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        for (key, kind) in SCHEMA {
            if *kind == Kind::Path {
                if let Some(p) = self.path(key) {
                    if !p.exists() {
                        return Err(err(key, format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn check(key: &str, kind: Kind, value: &str) -> Result<(), ConfigError> {
    let bad = |what: &str| err(key, format!("expected {what}, got {value:?}"));
    match kind {
        Kind::Uint => value
            .parse::<u64>()
            .map(|_| ())
            .map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::Text(choices) => {
            if choices.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("one of {}", choices.join(", "))))
            }
        }
        Kind::FloatList => {
            let items: Vec<&str> = split_list(value).collect();
            if items.is_empty() || items.iter().any(|s| !s.parse::<f64>().is_ok_and(f64::is_finite)) {
                return Err(bad("a comma-separated list of numbers"));
            }
            Ok(())
        }
        Kind::UintList => {
            if split_list(value).any(|s| s.parse::<u64>().is_err()) {
                return Err(bad("a comma-separated list of integers"));
            }
            Ok(())
        }
        Kind::TextList(choices) => {
            if split_list(value).any(|s| !choices.contains(&s)) {
                return Err(bad(&format!("a comma-separated list from {}", choices.join(", "))));
            }
            Ok(())
        }
        Kind::Path => {
            if value.is_empty() {
                Err(bad("a path"))
            } else {
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::parse("# toy\nsde.kind = ve\nsde.steps=100 # grid\n\ndetect.t_set = 0.6, 0.4").unwrap();
        assert_eq!(c.require("sde.kind").unwrap(), "ve");
        assert_eq!(c.get::<usize>("sde.steps", 0).unwrap(), 100);
        assert_eq!(c.list::<f64>("detect.t_set").unwrap().unwrap(), vec![0.6, 0.4]);
        c.apply_override("sde.steps=200").unwrap();
        assert_eq!(c.get::<usize>("sde.steps", 0).unwrap(), 200);
        assert_eq!(c.get::<f64>("train.lr", 1e-3).unwrap(), 1e-3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse("sde.knd = ve").unwrap_err();
        assert_eq!(e.key, "sde.knd");
        let e = RunConfig::parse("sde.kind = vx").unwrap_err();
        assert_eq!(e.key, "sde.kind");
        assert!(RunConfig::parse("train.steps = -3").is_err());
        assert!(RunConfig::parse("train.lr = nan").is_err());
        assert!(RunConfig::parse("just words").is_err());
        let e = RunConfig::default().require("sde.kind").unwrap_err();
        assert!(e.to_string().contains("sde.kind"));
    }

    #[test]
    fn missing_paths_are_reported() {
        let c = RunConfig::parse("checkpoint = /definitely/not/here.ckpt").unwrap();
        assert_eq!(c.check_paths().unwrap_err().key, "checkpoint");
    }
}
