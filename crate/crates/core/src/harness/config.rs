//! Flat `key=value` configuration files and the classifier training config.

use crate::codec::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys and values are trimmed.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub flip_prob: f64,
    pub seed: u64,
    /// Rate–distortion weight, used only when training a codec.
    pub lambda: f64,
    /// Cosine decay of the learning rate over epochs; constant when off.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            flip_prob: 0.5,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            cosine: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }

    /// Applies one setting; `Ok(false)` for keys that are not training keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "flip_prob" => self.flip_prob = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "cosine" => self.cosine = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Optimizer settings for a given 0-based epoch.
    pub fn adam_for_epoch(&self, epoch: usize) -> AdamConfig {
        let lr = if self.cosine && self.epochs > 0 {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        };
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
