//! Experiment configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label serialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fifo,
    Pit,
    Dom,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Fifo, Strategy::Pit, Strategy::Dom];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Fifo => "fifo",
            Strategy::Pit => "pit",
            Strategy::Dom => "dom",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fifo" => Ok(Strategy::Fifo),
            "pit" => Ok(Strategy::Pit),
            "dom" => Ok(Strategy::Dom),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected fifo, pit or dom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Weight of the minimum-CTC term in the dominance loss.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_average_last: usize,
    pub subsample_factor: usize,
    /// Model width `H`.
    pub hidden: usize,
    pub strategy: Strategy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.1,
            learning_rate: 1e-3,
            epochs: 40,
            warmup_epochs: 4,
            batch_size: 8,
            seed: 0,
            checkpoint_average_last: 5,
            subsample_factor: 4,
            hidden: 32,
            strategy: Strategy::Dom,
        }
    }
}

const KEYS: [&str; 10] = [
    "alpha",
    "learning_rate",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "seed",
    "checkpoint_average_last",
    "subsample_factor",
    "hidden",
    "strategy",
];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.subsample_factor == 0 {
            return fail("subsample_factor must be positive");
        }
        if self.hidden == 0 {
            return fail("hidden must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs must not exceed epochs");
        }
        if self.checkpoint_average_last > self.epochs {
            return fail("checkpoint_average_last must not exceed epochs");
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_average_last" => self.checkpoint_average_last = num(key, value)?,
            "subsample_factor" => self.subsample_factor = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    /// Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let values = [
            format!("{:?}", self.alpha),
            format!("{:?}", self.learning_rate),
            self.epochs.to_string(),
            self.warmup_epochs.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.checkpoint_average_last.to_string(),
            self.subsample_factor.to_string(),
            self.hidden.to_string(),
            self.strategy.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.learning_rate, 1e-3);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ExperimentConfig::parse("alpha = 0.2\nbeta = 3\n").unwrap_err();
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn invariants_are_checked() {
        assert!(ExperimentConfig::parse("epochs = 3\nwarmup_epochs = 4").is_err());
        assert!(ExperimentConfig::parse("epochs = 3\ncheckpoint_average_last = 4").is_err());
        assert!(ExperimentConfig::parse("alpha = 1.5").is_err());
        assert!(ExperimentConfig::parse("strategy = lifo").is_err());
        let c = ExperimentConfig::parse("# comment\n\nstrategy = pit\nseed=7").unwrap();
        assert_eq!(c.strategy, Strategy::Pit);
        assert_eq!(c.seed, 7);
    }

    proptest! {
        #[test]
        fn text_round_trip(
            alpha in 0.0f64..=1.0,
            lr in 1e-6f64..1.0,
            epochs in 1usize..100,
            warm in 0usize..100,
            avg in 0usize..100,
            batch in 1usize..64,
            seed in any::<u64>(),
            sub in 1usize..8,
            hidden in 1usize..64,
            s in 0usize..3,
        ) {
            let cfg = ExperimentConfig {
                alpha,
                learning_rate: lr,
                epochs,
                warmup_epochs: warm.min(epochs),
                batch_size: batch,
                seed,
                checkpoint_average_last: avg.min(epochs),
                subsample_factor: sub,
                hidden,
                strategy: Strategy::ALL[s],
            };
            prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
