//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{HvaeError, Result};
use crate::model::{ModelConfig, Variant};
use crate::objectives::ScheduleConfig;

use super::adam::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Architecture; `resolution` is taken from the dataset at train time.
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub balancing: bool,
    pub data: PathBuf,
    pub checkpoint_every: u64,
    /// Std of the noise added to training images that seed the pseudo-inputs.
    pub pseudo_input_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: 100.0,
            batch_size: 16,
            max_iters: 2000,
            seed: 0,
            schedule: ScheduleConfig::default(),
            balancing: true,
            data: PathBuf::from("data"),
            checkpoint_every: 1000,
            pseudo_input_noise: 0.05,
        }
    }
}

/// Every recognised key, in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "levels",
    "resolution",
    "latent_channels",
    "base_channels",
    "max_channels",
    "k",
    "seg_channels",
    "supervise",
    "supervise_layer",
    "supervision_weight",
    "lr",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip",
    "batch",
    "iters",
    "seed",
    "cycle_length",
    "beta_init",
    "ramp_fraction",
    "balancing",
    "data",
    "checkpoint_every",
    "pseudo_input_noise",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| HvaeError::Config(format!("invalid value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "variant" => m.variant = v.parse::<Variant>()?,
            "levels" => m.levels = parse(key, v)?,
            "resolution" => m.resolution = parse(key, v)?,
            "latent_channels" => m.latent_channels = parse(key, v)?,
            "base_channels" => m.base_channels = parse(key, v)?,
            "max_channels" => m.max_channels = parse(key, v)?,
            "k" => m.components = parse(key, v)?,
            "seg_channels" => m.seg_channels = parse(key, v)?,
            "supervise" => m.supervision.enabled = parse(key, v)?,
            "supervise_layer" => m.supervision.target_layer = parse(key, v)?,
            "supervision_weight" => m.supervision.loss_weight = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "batch" => self.batch_size = parse(key, v)?,
            "iters" => self.max_iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "cycle_length" => self.schedule.cycle_length = parse(key, v)?,
            "beta_init" => self.schedule.beta_init = parse(key, v)?,
            "ramp_fraction" => self.schedule.ramp_fraction = parse(key, v)?,
            "balancing" => self.balancing = parse(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "pseudo_input_noise" => self.pseudo_input_noise = parse(key, v)?,
            other => return Err(HvaeError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "variant" => m.variant.to_string(),
            "levels" => m.levels.to_string(),
            "resolution" => m.resolution.to_string(),
            "latent_channels" => m.latent_channels.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "max_channels" => m.max_channels.to_string(),
            "k" => m.components.to_string(),
            "seg_channels" => m.seg_channels.to_string(),
            "supervise" => m.supervision.enabled.to_string(),
            "supervise_layer" => m.supervision.target_layer.to_string(),
            "supervision_weight" => m.supervision.loss_weight.to_string(),
            "lr" => self.adam.lr.to_string(),
            "weight_decay" => self.adam.weight_decay.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "batch" => self.batch_size.to_string(),
            "iters" => self.max_iters.to_string(),
            "seed" => self.seed.to_string(),
            "cycle_length" => self.schedule.cycle_length.to_string(),
            "beta_init" => self.schedule.beta_init.to_string(),
            "ramp_fraction" => self.schedule.ramp_fraction.to_string(),
            "balancing" => self.balancing.to_string(),
            "data" => self.data.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "pseudo_input_noise" => self.pseudo_input_noise.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HvaeError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HvaeError::Config(m.into()));
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.adam.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.max_iters == 0 {
            return bad("iters must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        self.schedule.validate()?;
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("variant", "nvmp+").unwrap();
        c.set("lr", "0.001").unwrap();
        c.set("supervise", "true").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_text("bogus = 1").is_err());
        assert!(RunConfig::from_text("lr 0.1").is_err());
    }
}
