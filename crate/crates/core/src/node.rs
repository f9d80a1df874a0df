//! Per-node composition: the consensus engine stacked on the anonymization
//! layer, exchanging effects with whatever transport drives the node.
//!
//! Layers never touch sockets or clocks directly. They consume events
//! (frames, timer expirations, injected transactions) and emit [`Action`]s;
//! the simulated and socket runtimes in [`crate::harness`] interpret those.

use crate::anonet::{AnonConfig, AnonLayer};
use crate::consensus::{Engine, ProtocolParams};
use crate::crypto::{Digest, Keypair};
use crate::genesis::Genesis;
use crate::ledger::{AccountId, Height, Tx};
use crate::wire::{Addr, Envelope};

/// Timer ids at or above this value belong to the anonymization layer.
pub const ANON_TIMER_BASE: u64 = 1 << 32;

/// Side effects a node asks its runtime to perform.
#[derive(Debug)]
pub enum Action {
    /// Put a frame on the wire. `about` tags the gossip message the frame
    /// belongs to for the harness's traffic-correlation bookkeeping; it is
    /// never serialized.
    SendFrame {
        dst: Addr,
        env: Envelope,
        about: Option<Digest>,
    },
    StartTimer {
        id: u64,
        delay_us: u64,
    },
    CancelTimer {
        id: u64,
    },
    Metric(MetricEvent),
}

/// Observable protocol events, consumed by the metrics collector and the
/// socket node's logger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricEvent {
    BlockCreated {
        height: Height,
        digest: Digest,
        producer: AccountId,
        alt_idx: u16,
        tx_count: usize,
    },
    BlockAccepted {
        height: Height,
        digest: Digest,
        producer: AccountId,
        alt_idx: u16,
        tx_count: usize,
    },
    BlockRejected {
        reason: &'static str,
    },
    TxRejected {
        reason: &'static str,
    },
    TimeoutExpired {
        height: Height,
        alt_idx: u16,
    },
    ForkBlockTracked {
        height: Height,
    },
    TipSwitch {
        from: Digest,
        to: Digest,
    },
    CheckpointFinalized {
        height: Height,
        digest: Digest,
    },
    CheckpointNoDecision {
        height: Height,
    },
    CircuitBuilt,
    CircuitDegraded {
        built: usize,
        wanted: usize,
    },
    EnvelopeDropped {
        reason: &'static str,
    },
    GossipFallback,
    SyncRequested {
        from_height: Height,
    },
}

/// A full protocol node: consensus engine plus anonymization layer.
pub struct ProtocolNode {
    pub engine: Engine,
    pub anon: AnonLayer,
}

impl ProtocolNode {
    pub fn new(
        genesis: &Genesis,
        id: AccountId,
        keypair: Keypair,
        params: ProtocolParams,
        anon_config: AnonConfig,
        rng_seed: u64,
    ) -> ProtocolNode {
        let engine = Engine::new(genesis, id, keypair.clone(), params);
        let anon = AnonLayer::new(id, keypair, genesis.directory.clone(), anon_config, rng_seed);
        ProtocolNode { engine, anon }
    }

    pub fn addr(&self) -> Addr {
        self.anon.own_addr()
    }

    /// Bring the node up: start circuit construction and schedule the first
    /// consensus round.
    pub fn start(&mut self, now_us: u64) -> Vec<Action> {
        let mut actions = self.anon.start(now_us);
        let outbound = self.engine.start(now_us);
        self.flush_engine(outbound, &mut actions, now_us);
        actions
    }

    /// A frame arrived from the wire.
    pub fn on_frame(&mut self, bytes: &[u8], now_us: u64) -> Vec<Action> {
        let env = match Envelope::decode(bytes) {
            Ok(e) => e,
            Err(_) => {
                return vec![Action::Metric(MetricEvent::EnvelopeDropped {
                    reason: "malformed-frame",
                })]
            }
        };
        let (mut actions, inbound) = self.anon.on_envelope(env, now_us);
        for msg in inbound {
            // A delivery counts as seen whether or not it validates; only
            // validated messages are re-forwarded (inside flush_engine).
            if msg.is_gossip() {
                self.anon.mark_seen(msg.gossip_digest());
            }
            let outbound = self.engine.on_message(msg, now_us);
            self.flush_engine(outbound, &mut actions, now_us);
        }
        actions
    }

    pub fn on_timer(&mut self, id: u64, now_us: u64) -> Vec<Action> {
        if id >= ANON_TIMER_BASE {
            self.anon.on_timer(id, now_us)
        } else {
            let mut actions = Vec::new();
            let outbound = self.engine.on_timer(id, now_us);
            self.flush_engine(outbound, &mut actions, now_us);
            actions
        }
    }

    /// Locally injected transaction (from a client or the CLI).
    pub fn on_inject_tx(&mut self, tx: Tx, now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        let outbound = self.engine.on_inject_tx(tx);
        self.flush_engine(outbound, &mut actions, now_us);
        actions
    }

    /// The node went offline (process paused); pending expectations die with
    /// it.
    pub fn on_pause(&mut self) {
        self.engine.pause();
    }

    /// Back online: rejoin the round and ask a peer for the blocks we missed.
    pub fn on_resume(&mut self, now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        let outbound = self.engine.resume(now_us);
        self.flush_engine(outbound, &mut actions, now_us);
        actions
    }

    /// Translate engine outputs into transport actions, feeding gossip and
    /// control messages through the anonymization layer.
    fn flush_engine(
        &mut self,
        outbound: crate::consensus::Outbound,
        actions: &mut Vec<Action>,
        now_us: u64,
    ) {
        for (msg, originated) in outbound.gossip {
            if originated {
                actions.extend(self.anon.gossip(&msg, now_us));
            } else {
                actions.extend(self.anon.forward_received(&msg, now_us));
            }
        }
        for (dst, msg) in outbound.direct {
            actions.extend(self.anon.send_control(dst, &msg));
        }
        for round in outbound.rounds_started {
            actions.extend(self.anon.on_round(round, now_us));
        }
        actions.append(&mut self.engine.take_actions());
    }
}
