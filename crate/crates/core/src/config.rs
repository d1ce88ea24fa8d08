//! Run configuration: one JSON document with `env`, `train`, `schedule`,
//! `timing` and `wire` sections. Every key is optional; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::flow::{SamplerConfig, TrainConfig};
use crate::pipeline::{ChunkShape, TimingModel};
use crate::schedule::HasParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Sampler steps `N`.
    pub steps: usize,
    pub alpha: f64,
    pub u_d: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha: 0.6,
            u_d: 0.9,
        }
    }
}

impl ScheduleConfig {
    pub fn has(&self) -> HasParams {
        HasParams {
            alpha: self.alpha,
            u_d: self.u_d,
        }
    }

    pub fn sampler(&self, exec_horizon: usize) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            has: self.has(),
            early_stop: true,
            exec_horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WireConfig {
    pub addr: String,
    pub duration_ms: f64,
    /// Target jumps per client run, placed uniformly.
    pub events: usize,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            duration_ms: 60_000.0,
            events: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub timing: TimingModel,
    pub wire: WireConfig,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Self {
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            timing: TimingModel::default(),
            wire: WireConfig::default(),
        };
        c.propagate();
        c
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.propagate();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies the schedule section into the places that also need it.
    fn propagate(&mut self) {
        self.train.has = self.schedule.has();
        self.timing.steps = self.schedule.steps;
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let s = &self.schedule;
        if s.steps == 0 || s.steps > u8::MAX as usize {
            return Err(Error::Config(format!("schedule.steps = {} outside [1, 255]", s.steps)));
        }
        s.has()
            .hit_times(self.env.horizon, 0)
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.train.validate(self.env.horizon)?;
        self.timing.validate()?;
        if self.wire.duration_ms <= 0.0 {
            return Err(Error::Config("wire.duration_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> ChunkShape {
        ChunkShape {
            horizon: self.env.horizon,
            has: self.schedule.has(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization; any effective change alters it.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}
