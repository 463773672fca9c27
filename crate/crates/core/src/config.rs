//! Run configuration as `key = value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::completion::{CompletionConfig, MaskingMode};
use crate::error::{Error, Result};
use crate::mask::MemoryPolicy;

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct ModelConfig {
    pub completion: CompletionConfig,
    pub memory: MemoryPolicy,
    /// Give the completion head its own encoder.
    pub separate_encoders: bool,
    /// Cut gradients from completion into predicted masks.
    pub detach_masks: bool,
}


#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: u64,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub no_mask_loss: bool,
    pub no_gan: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 4,
            iterations: 1000,
            lr: 1e-4,
            seed: 0,
            checkpoint_every: 100,
            no_mask_loss: false,
            no_gan: false,
            model: ModelConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Contract(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Every recognised key, in serialisation order.
    pub const KEYS: [&'static str; 17] = [
        "batch",
        "iterations",
        "lr",
        "seed",
        "checkpoint_every",
        "no_mask_loss",
        "no_gan",
        "dim",
        "heads",
        "blocks",
        "mlp_hidden",
        "masking",
        "no_mask_guidance",
        "stb_masked",
        "memory_every",
        "separate_encoders",
        "detach_masks",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.model.completion;
        match key {
            "batch" => self.batch = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "no_mask_loss" => self.no_mask_loss = parse(key, value)?,
            "no_gan" => self.no_gan = parse(key, value)?,
            "dim" => c.dim = parse(key, value)?,
            "heads" => c.heads = parse(key, value)?,
            "blocks" => c.blocks = parse(key, value)?,
            "mlp_hidden" => c.mlp_hidden = parse(key, value)?,
            "masking" => c.masking = MaskingMode::from_str(value)?,
            "no_mask_guidance" => c.guidance = !parse::<bool>(key, value)?,
            "stb_masked" => c.stb_masked = parse(key, value)?,
            "memory_every" => self.model.memory.every = parse(key, value)?,
            "separate_encoders" => self.model.separate_encoders = parse(key, value)?,
            "detach_masks" => self.model.detach_masks = parse(key, value)?,
            _ => return Err(Error::Contract(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Contract(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let c = &self.model.completion;
        let values = [
            self.batch.to_string(),
            self.iterations.to_string(),
            format!("{:e}", self.lr),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
            self.no_mask_loss.to_string(),
            self.no_gan.to_string(),
            c.dim.to_string(),
            c.heads.to_string(),
            c.blocks.to_string(),
            c.mlp_hidden.to_string(),
            c.masking.to_string(),
            (!c.guidance).to_string(),
            c.stb_masked.to_string(),
            self.model.memory.every.to_string(),
            self.model.separate_encoders.to_string(),
            self.model.detach_masks.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Contract("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.lr)));
        }
        if self.model.memory.every == 0 {
            return Err(Error::Contract("memory_every must be at least 1".into()));
        }
        self.model.completion.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 3e-4;
        cfg.no_gan = true;
        cfg.model.completion.masking = MaskingMode::PaperLiteral;
        cfg.model.completion.guidance = false;
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::from_text("# toy\nbatch = 2  # small\n\nheads = 2\n").unwrap();
        assert_eq!(cfg.batch, 2);
        assert_eq!(cfg.model.completion.heads, 2);
        assert!(TrainConfig::from_text("colour = red").is_err());
        assert!(TrainConfig::from_text("batch 2").is_err());
        assert!(TrainConfig::from_text("batch = 0").is_err());
        assert!(TrainConfig::from_text("heads = 3").is_err());
    }
}
