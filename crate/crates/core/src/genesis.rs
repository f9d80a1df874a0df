//! Genesis file handling. The genesis file doubles as the network directory:
//! it lists every initial participant's id, public key, network address,
//! stake, and balance, plus the protocol constants all nodes must agree on.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::ProtocolParams;
use crate::crypto::{hash, Digest, Keypair, PublicKey, Signature};
use crate::ledger::{AccountId, AccountState, ChainRules, GlobalState, Header};
use crate::wire::Addr;

/// One consensus participant as listed in the directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectoryEntry {
    pub id: AccountId,
    pub pk: PublicKey,
    pub addr: Addr,
}

/// Parsed and validated genesis configuration.
#[derive(Clone, Debug)]
pub struct Genesis {
    pub seed: [u8; 32],
    pub params: ProtocolParams,
    pub rules: ChainRules,
    /// Consensus nodes; list order fixes their account ids.
    pub directory: Vec<DirectoryEntry>,
    pub node_stakes: BTreeMap<AccountId, u64>,
    pub node_balances: BTreeMap<AccountId, u64>,
    /// Pre-funded non-consensus accounts (e.g. experiment clients).
    pub extra_accounts: Vec<(AccountId, PublicKey, u64)>,
}

impl Genesis {
    /// The account state every node starts from.
    pub fn initial_state(&self) -> GlobalState {
        let mut gs = GlobalState::new();
        for entry in &self.directory {
            gs.insert_account(AccountState::new(
                entry.id,
                entry.pk,
                self.node_balances.get(&entry.id).copied().unwrap_or(0),
                self.node_stakes.get(&entry.id).copied().unwrap_or(0),
            ));
        }
        for (id, pk, balance) in &self.extra_accounts {
            gs.insert_account(AccountState::new(*id, *pk, *balance, 0));
        }
        gs
    }

    /// Randomness of the synthetic genesis block: the 32-byte seed doubled to
    /// signature width. Round 1's leader comes from hashing these bytes.
    pub fn genesis_rand(&self) -> Signature {
        let mut bytes = [0u8; 64];
        bytes[..32].copy_from_slice(&self.seed);
        bytes[32..].copy_from_slice(&self.seed);
        Signature(bytes)
    }

    /// The synthetic block every chain starts from. Its digest anchors
    /// `h_prev` of height 1.
    pub fn genesis_header(&self) -> Header {
        Header {
            id: 0,
            h_prev: Digest::ZERO,
            txs_root: hash(b""),
            state_root: self.initial_state().state_root(),
            coinbase: PublicKey([0u8; 32]),
            rand: self.genesis_rand(),
            alt_idx: 0,
            sig: Signature::ZERO,
        }
    }

    pub fn genesis_digest(&self) -> Digest {
        self.genesis_header().digest()
    }

    pub fn entry(&self, id: AccountId) -> Option<&DirectoryEntry> {
        self.directory.iter().find(|e| e.id == id)
    }

    pub fn load(path: &Path) -> Result<Genesis, GenesisError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GenesisError::Io(path.display().to_string(), e.to_string()))?;
        Genesis::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Genesis, GenesisError> {
        let file: GenesisFile = toml::from_str(text)?;
        Genesis::from_file(file)
    }

    fn from_file(file: GenesisFile) -> Result<Genesis, GenesisError> {
        if file.version != 1 {
            return Err(GenesisError::Invalid(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let seed_bytes = hex::decode(&file.genesis_seed)
            .map_err(|_| GenesisError::Invalid("genesis_seed is not hex".into()))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| GenesisError::Invalid("genesis_seed must be 32 bytes".into()))?;

        let mut directory = Vec::new();
        let mut node_stakes = BTreeMap::new();
        let mut node_balances = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for node in &file.nodes {
            let pk = PublicKey::from_hex(&node.public_key).map_err(|_| {
                GenesisError::Invalid(format!("node {}: bad public_key", node.id))
            })?;
            let addr: Addr = node.network_address.parse().map_err(|_| {
                GenesisError::Invalid(format!("node {}: bad network_address", node.id))
            })?;
            if seen.insert(node.id, ()).is_some() {
                return Err(GenesisError::Invalid(format!("duplicate node id {}", node.id)));
            }
            directory.push(DirectoryEntry {
                id: node.id,
                pk,
                addr,
            });
            node_stakes.insert(node.id, node.stake);
            node_balances.insert(node.id, node.balance);
        }
        if directory.is_empty() {
            return Err(GenesisError::Invalid("node list is empty".into()));
        }

        let mut extra_accounts = Vec::new();
        for acct in &file.accounts {
            let pk = PublicKey::from_hex(&acct.public_key).map_err(|_| {
                GenesisError::Invalid(format!("account {}: bad public_key", acct.id))
            })?;
            if seen.insert(acct.id, ()).is_some() {
                return Err(GenesisError::Invalid(format!(
                    "duplicate account id {}",
                    acct.id
                )));
            }
            extra_accounts.push((acct.id, pk, acct.balance));
        }

        Ok(Genesis {
            seed,
            params: ProtocolParams {
                block_timeout_us: file.block_timeout_ms * 1000,
                min_block_interval_us: file.min_block_interval_ms * 1000,
                full_reward: file.reward_full,
                partial_reward: file.reward_partial,
                alt_count: file.alt_leaders,
                max_block_txs: file.max_block_txs,
                checkpoint_interval: file.checkpoint_interval,
                committee_size: file.committee_size,
                ..ProtocolParams::default()
            },
            rules: ChainRules {
                stake_activation_delay: file.stake_activation_blocks,
                stake_unlock_delay: file.stake_unlock_blocks,
            },
            directory,
            node_stakes,
            node_balances,
            extra_accounts,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let file = GenesisFile {
            version: 1,
            genesis_seed: hex::encode(self.seed),
            stake_activation_blocks: self.rules.stake_activation_delay,
            stake_unlock_blocks: self.rules.stake_unlock_delay,
            checkpoint_interval: self.params.checkpoint_interval,
            committee_size: self.params.committee_size,
            reward_full: self.params.full_reward,
            reward_partial: self.params.partial_reward,
            alt_leaders: self.params.alt_count,
            max_block_txs: self.params.max_block_txs,
            block_timeout_ms: self.params.block_timeout_us / 1000,
            min_block_interval_ms: self.params.min_block_interval_us / 1000,
            nodes: self
                .directory
                .iter()
                .map(|e| GenesisNodeEntry {
                    id: e.id,
                    public_key: e.pk.to_hex(),
                    network_address: e.addr.to_string(),
                    stake: self.node_stakes.get(&e.id).copied().unwrap_or(0),
                    balance: self.node_balances.get(&e.id).copied().unwrap_or(0),
                })
                .collect(),
            accounts: self
                .extra_accounts
                .iter()
                .map(|(id, pk, balance)| GenesisAccountEntry {
                    id: *id,
                    public_key: pk.to_hex(),
                    balance: *balance,
                })
                .collect(),
        };
        toml::to_string_pretty(&file).expect("genesis serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct GenesisFile {
    version: u32,
    genesis_seed: String,
    stake_activation_blocks: u64,
    stake_unlock_blocks: u64,
    checkpoint_interval: u64,
    committee_size: usize,
    reward_full: u64,
    reward_partial: u64,
    alt_leaders: u16,
    max_block_txs: usize,
    block_timeout_ms: u64,
    min_block_interval_ms: u64,
    nodes: Vec<GenesisNodeEntry>,
    #[serde(default)]
    accounts: Vec<GenesisAccountEntry>,
}

#[derive(Serialize, Deserialize)]
struct GenesisNodeEntry {
    id: u64,
    public_key: String,
    network_address: String,
    stake: u64,
    balance: u64,
}

#[derive(Serialize, Deserialize)]
struct GenesisAccountEntry {
    id: u64,
    public_key: String,
    balance: u64,
}

/// Node secret keys, distributed out of band next to the genesis file.
/// Plainly insecure storage, fit for experiments only.
#[derive(Serialize, Deserialize)]
struct KeysFile {
    keys: Vec<KeyEntry>,
}

#[derive(Serialize, Deserialize)]
struct KeyEntry {
    id: u64,
    secret_seed: String,
}

pub fn save_keys(keys: &BTreeMap<AccountId, Keypair>) -> String {
    let file = KeysFile {
        keys: keys
            .iter()
            .map(|(id, kp)| KeyEntry {
                id: *id,
                secret_seed: hex::encode(kp.seed()),
            })
            .collect(),
    };
    toml::to_string_pretty(&file).expect("keys serialize")
}

pub fn load_keys(path: &Path) -> Result<BTreeMap<AccountId, Keypair>, GenesisError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GenesisError::Io(path.display().to_string(), e.to_string()))?;
    let file: KeysFile = toml::from_str(&text)?;
    let mut out = BTreeMap::new();
    for entry in file.keys {
        let bytes = hex::decode(&entry.secret_seed)
            .map_err(|_| GenesisError::Invalid(format!("key {}: bad seed hex", entry.id)))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| GenesisError::Invalid(format!("key {}: seed must be 32 bytes", entry.id)))?;
        out.insert(entry.id, Keypair::from_seed(&seed));
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum GenesisError {
    #[error("cannot read {0}: {1}")]
    Io(String, String),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid genesis: {0}")]
    Invalid(String),
}
