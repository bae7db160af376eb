use std::fmt::Write as _;

use crate::model::{Ablation, DropoutConfig, ModelConfig};

use super::{Result, TrainError};

/// Optimizer, schedule and model-shape settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub lr_halve_every: usize,
    pub max_epochs: usize,
    pub joint_mode_loss: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub emb_size: usize,
    pub hidden_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip: 5.0,
            batch_size: 1024,
            dropout: 0.5,
            lr_halve_every: 3,
            max_epochs: 30,
            joint_mode_loss: false,
            seed: 42,
            ablation: Ablation::Full,
            emb_size: 100,
            hidden_size: 100,
        }
    }
}

pub const KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "clip",
    "batch-size",
    "dropout",
    "lr-halve-every",
    "max-epochs",
    "joint-mode-loss",
    "seed",
    "ablation",
    "emb-size",
    "hidden-size",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "batch-size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "lr-halve-every" => self.lr_halve_every = parse(key, v)?,
            "max-epochs" => self.max_epochs = parse(key, v)?,
            "joint-mode-loss" => self.joint_mode_loss = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ablation" => self.ablation = v.parse().map_err(|e| TrainError::Config(format!("{e}")))?,
            "emb-size" => self.emb_size = parse(key, v)?,
            "hidden-size" => self.hidden_size = parse(key, v)?,
            other => return Err(TrainError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.lr.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.epsilon.to_string(),
            self.clip.to_string(),
            self.batch_size.to_string(),
            self.dropout.to_string(),
            self.lr_halve_every.to_string(),
            self.max_epochs.to_string(),
            self.joint_mode_loss.to_string(),
            self.seed.to_string(),
            self.ablation.to_string(),
            self.emb_size.to_string(),
            self.hidden_size.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("clip", self.clip),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::Config("Adam betas must be below 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || self.lr_halve_every == 0 || self.emb_size == 0 || self.hidden_size == 0 {
            return Err(TrainError::Config(
                "batch-size, lr-halve-every, emb-size and hidden-size must be at least 1".into(),
            ));
        }
        if self.joint_mode_loss && self.ablation == Ablation::NoRepeat {
            return Err(TrainError::Config(
                "joint-mode-loss needs the mode predictor, which the no-repeat ablation removes".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: halved every `lr_halve_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch.max(1) - 1) / self.lr_halve_every;
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            ablation: self.ablation,
            ..ModelConfig::with_sizes(num_items, self.emb_size, self.hidden_size)
        }
    }

    pub fn dropout_config(&self) -> DropoutConfig {
        DropoutConfig {
            p: self.dropout,
            ..DropoutConfig::default()
        }
    }
}
