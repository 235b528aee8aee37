use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Image encoder and classifier only.
    Baseline,
    /// Guided training with the text encoder held at its initialization.
    GuidedFrozen,
    GuidedUnfrozen,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Baseline, Regime::GuidedFrozen, Regime::GuidedUnfrozen];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::GuidedFrozen => "guided_frozen",
            Regime::GuidedUnfrozen => "guided_unfrozen",
        }
    }

    pub fn is_guided(self) -> bool {
        self != Regime::Baseline
    }

    pub fn text_frozen(self) -> bool {
        self == Regime::GuidedFrozen
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}` (expected baseline, guided_frozen or guided_unfrozen)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub regime: Regime,
    /// Model preset name, `desk` or `paper`.
    pub preset: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
            regime: Regime::Baseline,
            preset: "desk".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}
