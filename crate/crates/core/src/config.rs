//! Simulation configuration, loaded from TOML. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::geometry::{BlockageModel, Mobility, Room};
use crate::policy::train::TrainConfig;
use crate::policy::{FeatureSet, StateNorms};
use crate::queue::{ArrivalConfig, RiskParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Optimal,
    Policy,
    Random,
    Nearest,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Optimal,
        SchedulerKind::Policy,
        SchedulerKind::Random,
        SchedulerKind::Nearest,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Optimal => "optimal",
            SchedulerKind::Policy => "policy",
            SchedulerKind::Random => "random",
            SchedulerKind::Nearest => "nearest",
        }
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheduler {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    /// Masked argmax per head.
    Greedy,
    /// Masked sampling per head.
    Sample,
}

/// Policy architecture and observation encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySettings {
    pub hidden: usize,
    pub features: FeatureSet,
    pub norms: StateNorms,
    pub decode: Decode,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            hidden: 128,
            features: FeatureSet::LosQueues,
            norms: StateNorms::default(),
            decode: Decode::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_ris: usize,
    pub num_users: usize,
    /// Slots per episode.
    pub horizon: usize,
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub room_side: f64,
    /// Channel phases are redrawn every this many slots.
    pub phase_coherence_slots: usize,
    /// Sliding window of the online EVaR trace, in slots.
    pub evar_window: usize,
    pub channel: ChannelParams,
    pub risk: RiskParams,
    pub arrivals: ArrivalConfig,
    pub mobility: Mobility,
    pub blockage: BlockageModel,
    pub policy: PolicySettings,
    pub train: TrainConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_ris: 4,
            num_users: 3,
            horizon: 1000,
            seed: 1,
            scheduler: SchedulerKind::Optimal,
            room_side: 40.0,
            phase_coherence_slots: 1,
            evar_window: 10_000,
            channel: ChannelParams::default(),
            risk: RiskParams::default(),
            arrivals: ArrivalConfig::default(),
            mobility: Mobility::default(),
            blockage: BlockageModel::default(),
            policy: PolicySettings::default(),
            train: TrainConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ris == 0 || self.num_users == 0 {
            return Err(Error::invalid("need at least one RIS and one user"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least one slot"));
        }
        if self.phase_coherence_slots == 0 || self.evar_window == 0 {
            return Err(Error::invalid("phase_coherence_slots and evar_window must be positive"));
        }
        self.room()?;
        self.channel.validate()?;
        self.arrivals.rates(self.num_users)?;
        self.mobility.validate()?;
        self.blockage.validate()?;
        self.policy.norms.validate()?;
        if self.policy.hidden == 0 {
            return Err(Error::invalid("policy hidden width must be positive"));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn room(&self) -> Result<Room> {
        Room::new(self.room_side, self.num_ris, self.channel.min_link_distance)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SimConfig::from_toml(&text).map_err(|e| match e {
            Error::InvalidParameter(message) => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = SimConfig::default();
        c.validate().unwrap();
        let back = SimConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = SimConfig::from_toml("num_users = 7\nseed = 9\n[risk]\nv_tradeoff = 5.0\n").unwrap();
        assert_eq!(c.num_users, 7);
        assert_eq!(c.risk.v_tradeoff(), 5.0);
        assert_eq!(c.risk.epsilon(), 2.0);
        assert_ne!(c.hash(), SimConfig::default().hash());
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(SimConfig::from_toml("num_user = 3\n").is_err());
        assert!(SimConfig::from_toml("[channel]\nfrequency = 1.0\n").is_err());
    }

    #[test]
    fn infeasible_values_fail() {
        assert!(SimConfig::from_toml("horizon = 0\n").is_err());
        assert!(SimConfig::from_toml("[risk]\nepsilon = 1.0\ngamma = 0.01\nkappa = 10.0\n").is_err());
        assert!(SimConfig::from_toml("[arrivals]\nper_user = [1.0]\n").is_err());
        assert!(SimConfig::from_toml("[blockage]\np_stay_los = 2.0\n").is_err());
    }

    #[test]
    fn scheduler_names_parse() {
        for k in SchedulerKind::ALL {
            assert_eq!(k.name().parse::<SchedulerKind>().unwrap(), k);
        }
        assert!("best".parse::<SchedulerKind>().is_err());
    }
}
