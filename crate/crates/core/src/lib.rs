//! A proof-of-stake consensus node whose upcoming leader is publicly known
//! yet shielded from targeted denial of service by an onion-routed gossip
//! layer, together with a deterministic simulation harness for measuring it.
//!
//! The crate is organized around the protocol's moving parts:
//!
//! * [`crypto`] — hashing, deterministic signatures, key exchange, AEAD.
//! * [`ledger`] — transactions, blocks, account state, canonical encoding.
//! * [`election`] — stake-weighted leader/committee election.
//! * [`consensus`] — the per-node round state machine.
//! * [`forkchoice`] — chain quality, fork tracking, committee checkpoints.
//! * [`anonet`] — circuits, onion wrapping, and the gossip modes.
//! * [`node`] — glue composing consensus and the anonymization layer.
//! * [`genesis`] — genesis/directory file handling.
//! * [`harness`] — simulated and socket transports, scenarios, metrics.

pub mod anonet;
pub mod consensus;
pub mod crypto;
pub mod election;
pub mod forkchoice;
pub mod genesis;
pub mod harness;
pub mod ledger;
pub mod node;
pub mod wire;

pub use crypto::{Digest, Keypair, PublicKey, Signature};
pub use ledger::{AccountId, Block, GlobalState, Header, Height, Tx, TxKind};
