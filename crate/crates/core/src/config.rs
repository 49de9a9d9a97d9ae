//! `key = value` run configuration covering training and model settings.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

pub const KEYS: [&str; 18] = [
    "scenario",
    "seed",
    "batch_size",
    "lr_seg",
    "lr_pre",
    "theta_seg",
    "theta_pre",
    "epochs_seg",
    "pretrain_max_epochs",
    "pretrain_patience",
    "pretrain_tolerance",
    "levels",
    "base_width",
    "leaky_slope",
    "rep_channels",
    "decoder_blocks",
    "fusion",
    "variance_weight",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, m) = (&mut self.train, &mut self.model);
        match key {
            "scenario" => t.scenario = value.parse()?,
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_seg" => t.lr_seg = parse(key, value)?,
            "lr_pre" => t.lr_pre = parse(key, value)?,
            "theta_seg" => t.theta_seg = parse(key, value)?,
            "theta_pre" => t.theta_pre = parse(key, value)?,
            "epochs_seg" => t.epochs_seg = parse(key, value)?,
            "pretrain_max_epochs" => t.pretrain_max_epochs = parse(key, value)?,
            "pretrain_patience" => t.pretrain_patience = parse(key, value)?,
            "pretrain_tolerance" => t.pretrain_tolerance = parse(key, value)?,
            "levels" => m.levels = parse(key, value)?,
            "base_width" => m.base_width = parse(key, value)?,
            "leaky_slope" => m.leaky_slope = parse(key, value)?,
            "rep_channels" => m.rep_channels = parse(key, value)?,
            "decoder_blocks" => m.decoder_blocks = parse(key, value)?,
            "fusion" => m.fusion = value.parse()?,
            "variance_weight" => m.variance_weight = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` into a pair.
    pub fn split_assignment(text: &str) -> Result<(&str, &str)> {
        text.split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("expected key=value, got {text:?}")))
    }

    /// Applies every assignment of a config file; blank lines and `#` comments are skipped.
    /// Returns the keys that were set.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = Self::split_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            keys.push(k.to_string());
        }
        Ok(keys)
    }

    pub fn to_text(&self) -> String {
        let (t, m) = (&self.train, &self.model);
        let mut s = String::new();
        let values: [String; 18] = [
            t.scenario.to_string(),
            t.seed.to_string(),
            t.batch_size.to_string(),
            t.lr_seg.to_string(),
            t.lr_pre.to_string(),
            t.theta_seg.to_string(),
            t.theta_pre.to_string(),
            t.epochs_seg.to_string(),
            t.pretrain_max_epochs.to_string(),
            t.pretrain_patience.to_string(),
            t.pretrain_tolerance.to_string(),
            m.levels.to_string(),
            m.base_width.to_string(),
            m.leaky_slope.to_string(),
            m.rep_channels.to_string(),
            m.decoder_blocks.to_string(),
            m.fusion.to_string(),
            m.variance_weight.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }
}
