//! Scenario descriptions: everything one experiment run needs, loadable from
//! a TOML file. A fixed `rng_seed` makes a simulated run fully reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonet::{AnonConfig, AnonMode};
use crate::consensus::ProtocolParams;
use crate::crypto::{hash_parts, Keypair};
use crate::genesis::{DirectoryEntry, Genesis};
use crate::ledger::ChainRules;
use crate::wire::Addr;

/// One planned outage: the node drops off at `offline_at_ms` and returns at
/// `online_at_ms` (simulated time).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub node: u64,
    pub offline_at_ms: u64,
    pub online_at_ms: u64,
}

/// Per-link latency model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LatencyModel {
    FixedMs(u64),
    UniformMs { min: u64, max: u64 },
}

impl Default for LatencyModel {
    fn default() -> LatencyModel {
        LatencyModel::UniformMs { min: 5, max: 15 }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub name: String,
    pub node_count: usize,
    /// Initial stake per node; a single entry is broadcast to all nodes.
    pub stakes: Vec<u64>,
    pub anon_mode: AnonMode,
    pub n_circuits: usize,
    pub m_hops: usize,
    pub rotation_period: Option<u64>,
    pub max_block_txs: usize,
    /// Client transaction injections per simulated second (0 disables).
    pub tx_injection_rate: f64,
    pub client_accounts: usize,
    /// Fraction of injected transactions carrying a chain vote.
    pub vote_tx_fraction: f64,
    pub duration_ms: u64,
    /// Optional early stop once the observer's chain reaches this height.
    pub max_rounds: Option<u64>,
    pub churn: Vec<ChurnEvent>,
    /// Force the elected round leader offline for rounds in this inclusive
    /// window (leader-targeted churn).
    pub leader_offline_rounds: Option<(u64, u64)>,
    pub latency: LatencyModel,
    pub drop_rate: f64,
    pub rng_seed: u64,
    pub block_timeout_ms: u64,
    pub min_block_interval_ms: u64,
    pub checkpoint_interval: u64,
    pub committee_size: usize,
    pub alt_leaders: u16,
    pub reward_full: u64,
    pub reward_partial: u64,
    pub stake_activation_blocks: u64,
    pub stake_unlock_blocks: u64,
    /// Keep every link-capture record in memory (needed for the adversary
    /// analyses; byte counters are always on).
    pub record_capture: bool,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            name: "unnamed".into(),
            node_count: 6,
            stakes: vec![100],
            anon_mode: AnonMode::None,
            n_circuits: 8,
            m_hops: 3,
            rotation_period: None,
            max_block_txs: 30,
            tx_injection_rate: 0.0,
            client_accounts: 64,
            vote_tx_fraction: 0.0,
            duration_ms: 10_000,
            max_rounds: None,
            churn: Vec::new(),
            leader_offline_rounds: None,
            latency: LatencyModel::default(),
            drop_rate: 0.0,
            rng_seed: 1,
            block_timeout_ms: 500,
            min_block_interval_ms: 0,
            checkpoint_interval: 10,
            committee_size: 5,
            alt_leaders: 3,
            reward_full: 10,
            reward_partial: 1,
            stake_activation_blocks: 5,
            stake_unlock_blocks: 20,
            record_capture: false,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &std::path::Path) -> Result<ScenarioConfig, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(path.display().to_string(), e.to_string()))?;
        ScenarioConfig::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        file.build()
    }

    pub fn to_toml_string(&self) -> String {
        ScenarioFile::from_config(self).to_toml()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.node_count == 0 {
            return Err(ScenarioError::Invalid("node_count must be positive".into()));
        }
        if self.stakes.len() != 1 && self.stakes.len() != self.node_count {
            return Err(ScenarioError::Invalid(format!(
                "stakes must have 1 or {} entries, got {}",
                self.node_count,
                self.stakes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(ScenarioError::Invalid("drop_rate must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.vote_tx_fraction) {
            return Err(ScenarioError::Invalid(
                "vote_tx_fraction must be in [0,1]".into(),
            ));
        }
        for ev in &self.churn {
            if ev.node as usize >= self.node_count {
                return Err(ScenarioError::Invalid(format!(
                    "churn references node {} of {}",
                    ev.node, self.node_count
                )));
            }
            if ev.online_at_ms <= ev.offline_at_ms {
                return Err(ScenarioError::Invalid(
                    "churn online_at_ms must follow offline_at_ms".into(),
                ));
            }
        }
        if let LatencyModel::UniformMs { min, max } = self.latency {
            if min > max {
                return Err(ScenarioError::Invalid("latency min > max".into()));
            }
        }
        Ok(())
    }

    pub fn stake_of(&self, node: usize) -> u64 {
        if self.stakes.len() == 1 {
            self.stakes[0]
        } else {
            self.stakes[node]
        }
    }

    pub fn params(&self) -> ProtocolParams {
        ProtocolParams {
            block_timeout_us: self.block_timeout_ms * 1000,
            min_block_interval_us: self.min_block_interval_ms * 1000,
            full_reward: self.reward_full,
            partial_reward: self.reward_partial,
            alt_count: self.alt_leaders,
            max_block_txs: self.max_block_txs,
            checkpoint_interval: self.checkpoint_interval,
            committee_size: self.committee_size,
            bootstrap_delay_us: 500_000,
        }
    }

    pub fn anon_config(&self) -> AnonConfig {
        AnonConfig {
            mode: self.anon_mode,
            n_circuits: self.n_circuits,
            m_hops: self.m_hops,
            rotation_period: self.rotation_period,
        }
    }

    /// Deterministic key material: node and client keys derive from the
    /// scenario seed, so equal configs give byte-identical runs.
    pub fn node_keypair(&self, node: u64) -> Keypair {
        let d = hash_parts(&[
            b"scenario-node-key",
            &self.rng_seed.to_be_bytes(),
            &node.to_be_bytes(),
        ]);
        Keypair::from_seed(d.as_bytes())
    }

    pub fn client_keypair(&self, client: u64) -> Keypair {
        let d = hash_parts(&[
            b"scenario-client-key",
            &self.rng_seed.to_be_bytes(),
            &client.to_be_bytes(),
        ]);
        Keypair::from_seed(d.as_bytes())
    }

    /// Build the genesis this scenario runs from. Client accounts sit after
    /// the node accounts with generous balances.
    pub fn genesis(&self) -> Genesis {
        let directory: Vec<DirectoryEntry> = (0..self.node_count as u64)
            .map(|i| DirectoryEntry {
                id: i,
                pk: self.node_keypair(i).public(),
                addr: Addr::synthetic(i),
            })
            .collect();
        let seed = hash_parts(&[b"scenario-genesis-seed", &self.rng_seed.to_be_bytes()]);
        Genesis {
            seed: *seed.as_bytes(),
            params: self.params(),
            rules: ChainRules {
                stake_activation_delay: self.stake_activation_blocks,
                stake_unlock_delay: self.stake_unlock_blocks,
            },
            node_stakes: (0..self.node_count)
                .map(|i| (i as u64, self.stake_of(i)))
                .collect(),
            node_balances: (0..self.node_count as u64).map(|i| (i, 0)).collect(),
            directory,
            extra_accounts: (0..self.client_accounts as u64)
                .map(|c| {
                    let id = self.node_count as u64 + c;
                    (id, self.client_keypair(c).public(), 1_000_000_000)
                })
                .collect(),
        }
    }
}

/// Serde-facing mirror with optional fields and millisecond-based knobs.
#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    node_count: usize,
    #[serde(default)]
    stakes: Option<Vec<u64>>,
    #[serde(default)]
    anon_mode: Option<String>,
    #[serde(default)]
    n_circuits: Option<usize>,
    #[serde(default)]
    m_hops: Option<usize>,
    #[serde(default)]
    rotation_period: Option<u64>,
    #[serde(default)]
    max_block_txs: Option<usize>,
    #[serde(default)]
    tx_injection_rate: Option<f64>,
    #[serde(default)]
    client_accounts: Option<usize>,
    #[serde(default)]
    vote_tx_fraction: Option<f64>,
    duration_ms: u64,
    #[serde(default)]
    max_rounds: Option<u64>,
    #[serde(default)]
    churn: Vec<ChurnEvent>,
    #[serde(default)]
    leader_offline_from_round: Option<u64>,
    #[serde(default)]
    leader_offline_to_round: Option<u64>,
    #[serde(default)]
    latency_fixed_ms: Option<u64>,
    #[serde(default)]
    latency_min_ms: Option<u64>,
    #[serde(default)]
    latency_max_ms: Option<u64>,
    #[serde(default)]
    drop_rate: Option<f64>,
    #[serde(default)]
    rng_seed: Option<u64>,
    #[serde(default)]
    block_timeout_ms: Option<u64>,
    #[serde(default)]
    min_block_interval_ms: Option<u64>,
    #[serde(default)]
    checkpoint_interval: Option<u64>,
    #[serde(default)]
    committee_size: Option<usize>,
    #[serde(default)]
    alt_leaders: Option<u16>,
    #[serde(default)]
    reward_full: Option<u64>,
    #[serde(default)]
    reward_partial: Option<u64>,
    #[serde(default)]
    stake_activation_blocks: Option<u64>,
    #[serde(default)]
    stake_unlock_blocks: Option<u64>,
    #[serde(default)]
    record_capture: Option<bool>,
}

impl ScenarioFile {
    fn build(self) -> Result<ScenarioConfig, ScenarioError> {
        let d = ScenarioConfig::default();
        let latency = match (self.latency_fixed_ms, self.latency_min_ms, self.latency_max_ms) {
            (Some(ms), None, None) => LatencyModel::FixedMs(ms),
            (None, Some(min), Some(max)) => LatencyModel::UniformMs { min, max },
            (None, None, None) => LatencyModel::default(),
            _ => {
                return Err(ScenarioError::Invalid(
                    "latency: give latency_fixed_ms or latency_min_ms + latency_max_ms".into(),
                ))
            }
        };
        let anon_mode = match self.anon_mode {
            None => d.anon_mode,
            Some(s) => AnonMode::parse(&s)
                .ok_or_else(|| ScenarioError::Invalid(format!("unknown anon_mode '{s}'")))?,
        };
        let leader_offline_rounds = match (self.leader_offline_from_round, self.leader_offline_to_round)
        {
            (Some(a), Some(b)) if a <= b => Some((a, b)),
            (None, None) => None,
            _ => {
                return Err(ScenarioError::Invalid(
                    "leader offline window needs from ≤ to".into(),
                ))
            }
        };
        let cfg = ScenarioConfig {
            name: self.name.unwrap_or(d.name),
            node_count: self.node_count,
            stakes: self.stakes.unwrap_or(d.stakes),
            anon_mode,
            n_circuits: self.n_circuits.unwrap_or(d.n_circuits),
            m_hops: self.m_hops.unwrap_or(d.m_hops),
            rotation_period: self.rotation_period,
            max_block_txs: self.max_block_txs.unwrap_or(d.max_block_txs),
            tx_injection_rate: self.tx_injection_rate.unwrap_or(d.tx_injection_rate),
            client_accounts: self.client_accounts.unwrap_or(d.client_accounts),
            vote_tx_fraction: self.vote_tx_fraction.unwrap_or(d.vote_tx_fraction),
            duration_ms: self.duration_ms,
            max_rounds: self.max_rounds,
            churn: self.churn,
            leader_offline_rounds,
            latency,
            drop_rate: self.drop_rate.unwrap_or(d.drop_rate),
            rng_seed: self.rng_seed.unwrap_or(d.rng_seed),
            block_timeout_ms: self.block_timeout_ms.unwrap_or(d.block_timeout_ms),
            min_block_interval_ms: self.min_block_interval_ms.unwrap_or(d.min_block_interval_ms),
            checkpoint_interval: self.checkpoint_interval.unwrap_or(d.checkpoint_interval),
            committee_size: self.committee_size.unwrap_or(d.committee_size),
            alt_leaders: self.alt_leaders.unwrap_or(d.alt_leaders),
            reward_full: self.reward_full.unwrap_or(d.reward_full),
            reward_partial: self.reward_partial.unwrap_or(d.reward_partial),
            stake_activation_blocks: self
                .stake_activation_blocks
                .unwrap_or(d.stake_activation_blocks),
            stake_unlock_blocks: self.stake_unlock_blocks.unwrap_or(d.stake_unlock_blocks),
            record_capture: self.record_capture.unwrap_or(d.record_capture),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_config(c: &ScenarioConfig) -> ScenarioFile {
        let (fixed, min, max) = match c.latency {
            LatencyModel::FixedMs(ms) => (Some(ms), None, None),
            LatencyModel::UniformMs { min, max } => (None, Some(min), Some(max)),
        };
        ScenarioFile {
            name: Some(c.name.clone()),
            node_count: c.node_count,
            stakes: Some(c.stakes.clone()),
            anon_mode: Some(c.anon_mode.name().to_string()),
            n_circuits: Some(c.n_circuits),
            m_hops: Some(c.m_hops),
            rotation_period: c.rotation_period,
            max_block_txs: Some(c.max_block_txs),
            tx_injection_rate: Some(c.tx_injection_rate),
            client_accounts: Some(c.client_accounts),
            vote_tx_fraction: Some(c.vote_tx_fraction),
            duration_ms: c.duration_ms,
            max_rounds: c.max_rounds,
            churn: c.churn.clone(),
            leader_offline_from_round: c.leader_offline_rounds.map(|w| w.0),
            leader_offline_to_round: c.leader_offline_rounds.map(|w| w.1),
            latency_fixed_ms: fixed,
            latency_min_ms: min,
            latency_max_ms: max,
            drop_rate: Some(c.drop_rate),
            rng_seed: Some(c.rng_seed),
            block_timeout_ms: Some(c.block_timeout_ms),
            min_block_interval_ms: Some(c.min_block_interval_ms),
            checkpoint_interval: Some(c.checkpoint_interval),
            committee_size: Some(c.committee_size),
            alt_leaders: Some(c.alt_leaders),
            reward_full: Some(c.reward_full),
            reward_partial: Some(c.reward_partial),
            stake_activation_blocks: Some(c.stake_activation_blocks),
            stake_unlock_blocks: Some(c.stake_unlock_blocks),
            record_capture: Some(c.record_capture),
        }
    }

    fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {0}: {1}")]
    Io(String, String),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = ScenarioConfig {
            name: "x".into(),
            node_count: 9,
            anon_mode: AnonMode::Dandelion,
            tx_injection_rate: 120.0,
            churn: vec![ChurnEvent {
                node: 1,
                offline_at_ms: 100,
                online_at_ms: 300,
            }],
            leader_offline_rounds: Some((3, 9)),
            latency: LatencyModel::FixedMs(7),
            ..ScenarioConfig::default()
        };
        cfg.rng_seed = 99;
        let text = cfg.to_toml_string();
        let parsed = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(parsed.node_count, 9);
        assert_eq!(parsed.anon_mode, AnonMode::Dandelion);
        assert_eq!(parsed.latency, LatencyModel::FixedMs(7));
        assert_eq!(parsed.leader_offline_rounds, Some((3, 9)));
        assert_eq!(parsed.rng_seed, 99);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(ScenarioConfig::from_toml_str("node_count = 0\nduration_ms = 1").is_err());
        assert!(ScenarioConfig::from_toml_str("garbage").is_err());
        let bad_churn = r#"
node_count = 3
duration_ms = 1000
[[churn]]
node = 9
offline_at_ms = 5
online_at_ms = 10
"#;
        assert!(ScenarioConfig::from_toml_str(bad_churn).is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("node_count = 6\nduration_ms = 500").unwrap();
        assert_eq!(cfg.anon_mode, AnonMode::None);
        assert_eq!(cfg.m_hops, 3);
        assert_eq!(cfg.n_circuits, 8);
        assert_eq!(cfg.stake_of(5), 100);
    }

    #[test]
    fn genesis_is_seed_deterministic() {
        let a = ScenarioConfig::from_toml_str("node_count = 4\nduration_ms = 1\nrng_seed = 7")
            .unwrap();
        let b = ScenarioConfig::from_toml_str("node_count = 4\nduration_ms = 1\nrng_seed = 7")
            .unwrap();
        assert_eq!(a.genesis().genesis_digest(), b.genesis().genesis_digest());
        let c = ScenarioConfig::from_toml_str("node_count = 4\nduration_ms = 1\nrng_seed = 8")
            .unwrap();
        assert_ne!(a.genesis().genesis_digest(), c.genesis().genesis_digest());
    }
}
