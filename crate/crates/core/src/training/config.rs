use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv;

/// Optimization, schedule and stopping settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingConfig {
    pub initial_lr: f64,
    /// Epoch indices from which the rate is divided once more.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// L2 coefficient folded into the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub moving_average_window: usize,
    pub patience: usize,
    pub seed: u64,
    pub epsilon_dice: f64,
    /// Hard cap on the epoch loop.
    pub max_epochs: usize,
    /// Random flips, rotation, scaling and intensity shifts on training
    /// samples.
    pub augment: bool,
    /// Fraction of volumes held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            initial_lr: 1e-4,
            lr_drop_epochs: vec![250, 400, 550],
            lr_drop_factor: 5.0,
            weight_decay: 1e-5,
            batch_size: 1,
            moving_average_window: 30,
            patience: 60,
            seed: 0,
            epsilon_dice: 1e-5,
            max_epochs: 1000,
            augment: true,
            validation_fraction: 0.2,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.epsilon_dice > 0.0 && self.epsilon_dice.is_finite()) {
            return bad(format!(
                "epsilon_dice must be positive, got {}",
                self.epsilon_dice
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("moving_average_window", self.moving_average_window),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.moving_average_window > self.patience {
            return bad(format!(
                "moving_average_window {} exceeds patience {}",
                self.moving_average_window, self.patience
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_string())?)
    }
}

impl fmt::Display for TrainingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "initial_lr = {}", self.initial_lr)?;
        writeln!(f, "lr_drop_epochs = {}", kv::join(&self.lr_drop_epochs))?;
        writeln!(f, "lr_drop_factor = {}", self.lr_drop_factor)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "moving_average_window = {}", self.moving_average_window)?;
        writeln!(f, "patience = {}", self.patience)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "epsilon_dice = {}", self.epsilon_dice)?;
        writeln!(f, "max_epochs = {}", self.max_epochs)?;
        writeln!(f, "augment = {}", self.augment)?;
        writeln!(f, "validation_fraction = {}", self.validation_fraction)
    }
}

impl FromStr for TrainingConfig {
    type Err = Error;

    /// Parses `key = value` lines; missing keys keep their defaults.
    fn from_str(text: &str) -> Result<Self> {
        fn num<T: FromStr>(key: &str, line: usize, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = `{value}`")))
        }
        let mut c = TrainingConfig::default();
        for e in kv::parse(text).map_err(Error::Config)? {
            let (k, l, v) = (e.key, e.line, e.value);
            match k {
                "initial_lr" => c.initial_lr = num(k, l, v)?,
                "lr_drop_epochs" => {
                    c.lr_drop_epochs = kv::list(v).ok_or_else(|| {
                        Error::Config(format!("line {l}: cannot parse {k} = `{v}`"))
                    })?
                }
                "lr_drop_factor" => c.lr_drop_factor = num(k, l, v)?,
                "weight_decay" => c.weight_decay = num(k, l, v)?,
                "batch_size" => c.batch_size = num(k, l, v)?,
                "moving_average_window" => c.moving_average_window = num(k, l, v)?,
                "patience" => c.patience = num(k, l, v)?,
                "seed" => c.seed = num(k, l, v)?,
                "epsilon_dice" => c.epsilon_dice = num(k, l, v)?,
                "max_epochs" => c.max_epochs = num(k, l, v)?,
                "augment" => c.augment = num(k, l, v)?,
                "validation_fraction" => c.validation_fraction = num(k, l, v)?,
                other => return Err(Error::Config(format!("line {l}: unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainingConfig::default();
        c.validate().unwrap();
        assert_eq!(c.to_string().parse::<TrainingConfig>().unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: TrainingConfig = "initial_lr = 0.003\nseed = 9\nlr_drop_epochs = 10,20\n"
            .parse()
            .unwrap();
        assert_eq!(c.initial_lr, 3e-3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.lr_drop_epochs, vec![10, 20]);
        assert_eq!(c.patience, 60);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "initial_lr = 0",
            "batch_size = 0",
            "moving_average_window = 80",
            "patience = x",
            "colour = red",
            "validation_fraction = 1",
        ] {
            assert!(
                matches!(text.parse::<TrainingConfig>(), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
