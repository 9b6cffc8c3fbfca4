//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! one of [`KEYS`]; anything else is rejected with the list of valid keys.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEYS: [&str; 17] = [
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "verb_loss_mode",
    "focal_gamma",
    "loss_w_verb",
    "loss_w_role",
    "loss_w_caption",
    "d_model",
    "n_heads",
    "n_layers",
    "dropout",
    "max_caption_len",
    "theta_role",
    "fps",
    "M",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Name of a registered verb-loss strategy.
    pub verb_loss_mode: String,
    pub focal_gamma: f64,
    pub loss_w_verb: f64,
    pub loss_w_role: f64,
    pub loss_w_caption: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub max_caption_len: usize,
    pub theta_role: f64,
    pub fps: f64,
    #[serde(rename = "M")]
    pub m: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            verb_loss_mode: "plain".into(),
            focal_gamma: 2.0,
            loss_w_verb: 1.0,
            loss_w_role: 1.0,
            loss_w_caption: 1.0,
            d_model: 1024,
            n_heads: 8,
            n_layers: 3,
            dropout: 0.1,
            max_caption_len: 15,
            theta_role: 0.5,
            fps: 1.0,
            m: 15,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

impl RunConfig {
    /// Small model and higher learning rate used for the synthetic overfit suite.
    pub fn synthetic_overfit() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 8,
            epochs: 150,
            seed: 7,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "verb_loss_mode" => self.verb_loss_mode = value.trim().to_string(),
            "focal_gamma" => self.focal_gamma = parse(key, value)?,
            "loss_w_verb" => self.loss_w_verb = parse(key, value)?,
            "loss_w_role" => self.loss_w_role = parse(key, value)?,
            "loss_w_caption" => self.loss_w_caption = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "max_caption_len" => self.max_caption_len = parse(key, value)?,
            "theta_role" => self.theta_role = parse(key, value)?,
            "fps" => self.fps = parse(key, value)?,
            "M" => self.m = parse(key, value)?,
            other => {
                return Err(Error::Config {
                    key: other.to_string(),
                    msg: format!("unknown key; valid keys are: {}", KEYS.join(", ")),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "verb_loss_mode" => self.verb_loss_mode.clone(),
            "focal_gamma" => self.focal_gamma.to_string(),
            "loss_w_verb" => self.loss_w_verb.to_string(),
            "loss_w_role" => self.loss_w_role.to_string(),
            "loss_w_caption" => self.loss_w_caption.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "dropout" => self.dropout.to_string(),
            "max_caption_len" => self.max_caption_len.to_string(),
            "theta_role" => self.theta_role.to_string(),
            "fps" => self.fps.to_string(),
            "M" => self.m.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.to_string(),
                msg: "override must look like key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        self.check()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: format!("line {} is not `key = value`", n + 1),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap());
        }
        s
    }

    pub fn check(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads", "must divide d_model");
        }
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.max_caption_len == 0 {
            return bad("max_caption_len", "must be at least 1");
        }
        if !(self.theta_role > 0.0 && self.theta_role < 1.0) {
            return bad("theta_role", "must lie in (0, 1)");
        }
        if !(self.fps > 0.0) {
            return bad("fps", "must be positive");
        }
        if self.m == 0 {
            return bad("M", "must be at least 1");
        }
        if self.verb_loss_mode == "focal" && !(self.focal_gamma > 0.0) {
            return bad("focal_gamma", "must be positive in focal mode");
        }
        Ok(())
    }
}

/// Help text listing every key with its default.
pub fn describe_keys() -> String {
    let d = RunConfig::default();
    let mut s = String::from("config keys (defaults):\n");
    for k in KEYS {
        let _ = writeln!(s, "  {k:<16} {}", d.get(k).unwrap());
    }
    s
}
