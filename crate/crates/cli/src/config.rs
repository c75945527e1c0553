//! Flat `key=value` run configuration shared by the config file and the
//! command-line overrides.

use std::fmt;

use anyhow::{anyhow, bail, Result};
use dksan::network::NetworkConfig;
use dksan::training::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let net = NetworkConfig::preset(name)?;
        let train = if name == "paper" { TrainConfig::paper() } else { TrainConfig::default() };
        Ok(Self { net, train })
    }

    pub fn all_keys() -> Vec<&'static str> {
        NetworkConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()).copied().collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "scale" {
            return self.set_scale(value.trim().parse().map_err(|_| anyhow!("scale: cannot parse {value:?}"))?);
        }
        if self.net.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        bail!("unknown key {key:?}; valid keys: scale, {}", Self::all_keys().join(", "))
    }

    /// `scale` must be a power of two; it fixes the number of x2 levels.
    pub fn set_scale(&mut self, scale: usize) -> Result<()> {
        if !scale.is_power_of_two() || scale < 2 {
            bail!("scale must be a power of two >= 2, got {scale}");
        }
        let levels = scale.trailing_zeros() as usize;
        self.net.levels = levels;
        self.net.rcab_counts.resize(levels, *self.net.rcab_counts.last().unwrap_or(&1));
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not key=value; valid keys: scale, {}", Self::all_keys().join(", ")))?;
        self.set(k.trim(), v)
    }

    /// Lines of `key = value`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            self.apply_override(body).map_err(|e| anyhow!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[network] scale x{}", self.net.scale())?;
        write!(f, "{}", self.net)?;
        writeln!(f, "[training]")?;
        write!(f, "{}", self.train)
    }
}
