//! Flat `key = value` run configuration.
//!
//! Keys are the training fields (`batch_size`, `lr`, `seed`, ...) and the
//! model fields (`d_model`, `n_layers`, ...). `#` starts a comment. Later
//! assignments win, so command-line overrides are applied after the file.

use std::collections::BTreeMap;
use std::path::Path;

use adsorbtext::encoder::EncoderConfig;
use adsorbtext::training::TrainConfig;
use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Model keys, applied once the vocabulary size is known.
    model: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        if EncoderConfig::new(1).set(key, value)? {
            self.model.insert(key.to_owned(), value.trim().to_owned());
            return Ok(());
        }
        bail!("unknown configuration key `{key}`")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected `key = value`", i + 1))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let mut c = EncoderConfig::new(vocab_size);
        for (k, v) in &self.model {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Model keys as given, for use when the architecture comes from a checkpoint.
    pub fn model_overrides(&self) -> &BTreeMap<String, String> {
        &self.model
    }

    pub fn resolved(&self, model: Option<&EncoderConfig>) -> BTreeMap<String, String> {
        let mut kv = self.train.to_kv();
        match model {
            Some(m) => kv.extend(m.to_kv()),
            None => kv.extend(self.model.clone()),
        }
        kv
    }
}
