//! The native anonymization layer: directory-based circuit construction,
//! onion-layered sending, relay/exit behavior, and the gossip modes.
//!
//! Every node builds `n_circuits` circuits of `m_hops` relays drawn from the
//! directory. The final hop of each circuit is registered as a consensus
//! peer. How a message travels depends on the mode:
//!
//! * `TorLike` — the sender onion-routes a copy to every consensus peer
//!   through a randomly chosen circuit; the exit forwards the plaintext to
//!   the addressee, and every receiver re-gossips through its own circuits.
//! * `GossipNode` — the sender onion-routes to its exits; from there the
//!   message fans out hop-by-hop under pairwise link keys, so no plaintext
//!   ever crosses a wire.
//! * `Dandelion` — circuits for the first dissemination, cleartext flooding
//!   afterwards.
//! * `None` — cleartext flooding everywhere (the baseline).
//!
//! Relays look up circuit keys by the address the frame arrived from; a
//! relay that serves several circuits over the same predecessor link simply
//! tries each candidate key until one authenticates.

mod onion;

pub use onion::{onion_wrap, peel, Peeled};

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::crypto::{kx_ack_transcript, kx_respond, seal, Digest, Keypair, KxInitiator, SymKey};
use crate::genesis::DirectoryEntry;
use crate::ledger::AccountId;
use crate::node::{Action, MetricEvent, ANON_TIMER_BASE};
use crate::wire::{Addr, Envelope, EnvelopeKind, NetMsg};

/// Which dissemination strategy the network runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnonMode {
    TorLike,
    GossipNode,
    Dandelion,
    None,
}

impl AnonMode {
    pub fn parse(s: &str) -> Option<AnonMode> {
        match s.to_ascii_lowercase().as_str() {
            "torlike" | "tor" => Some(AnonMode::TorLike),
            "gossipnode" | "gossip" => Some(AnonMode::GossipNode),
            "dandelion" => Some(AnonMode::Dandelion),
            "none" | "plain" => Some(AnonMode::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnonMode::TorLike => "torlike",
            AnonMode::GossipNode => "gossipnode",
            AnonMode::Dandelion => "dandelion",
            AnonMode::None => "none",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnonConfig {
    pub mode: AnonMode,
    /// Circuits to maintain (and thus consensus peers to reach).
    pub n_circuits: usize,
    /// Relays per circuit.
    pub m_hops: usize,
    /// Rebuild all circuits every this many rounds; `None` disables rotation.
    pub rotation_period: Option<u64>,
}

impl Default for AnonConfig {
    fn default() -> AnonConfig {
        AnonConfig {
            mode: AnonMode::TorLike,
            n_circuits: 8,
            m_hops: 3,
            rotation_period: None,
        }
    }
}

/// An established circuit. `hops[m-1]` doubles as the consensus peer.
#[derive(Clone, Debug)]
pub struct Circuit {
    pub hops: Vec<AccountId>,
    pub hop_addrs: Vec<Addr>,
    pub keys: Vec<SymKey>,
    pub created_at_round: u64,
}

impl Circuit {
    pub fn exit(&self) -> AccountId {
        *self.hops.last().expect("circuits are non-empty")
    }
}

const MAX_BUILD_ATTEMPTS: u8 = 3;
const KX_TIMEOUT_US: u64 = 300_000;

struct PendingCircuit {
    route: Vec<AccountId>,
    keys: Vec<Option<SymKey>>,
    // exchange id → (hop index, initiator half)
    exchanges: BTreeMap<u64, (usize, KxInitiator)>,
    attempts: u8,
    timer_id: u64,
}

struct PendingLink {
    exchange_id: u64,
    initiator: KxInitiator,
    queued: Vec<(Vec<u8>, Option<Digest>)>,
    attempts: u8,
    timer_id: u64,
}

enum TimerKind {
    CircuitBuild(u64),
    LinkBuild(Addr),
}

pub struct AnonLayer {
    id: AccountId,
    addr: Addr,
    keypair: Keypair,
    config: AnonConfig,
    directory: Vec<DirectoryEntry>,
    addr_of: BTreeMap<AccountId, Addr>,
    circuits: Vec<Circuit>,
    /// Previous generation kept for the grace round after a rotation.
    old_circuits: Vec<Circuit>,
    pending: BTreeMap<u64, PendingCircuit>,
    next_slot: u64,
    /// Candidate circuit/link keys for frames arriving from each address.
    recv_keys: BTreeMap<Addr, Vec<SymKey>>,
    /// Pairwise sending keys for LinkEncrypted fan-out.
    link_keys: BTreeMap<Addr, SymKey>,
    link_pending: BTreeMap<Addr, PendingLink>,
    link_exchanges: BTreeMap<u64, Addr>,
    timers: BTreeMap<u64, TimerKind>,
    seen: BTreeSet<Digest>,
    rng: ChaCha12Rng,
    next_exchange: u64,
    next_timer: u64,
    current_round: u64,
    rotated_at: Option<u64>,
}

impl AnonLayer {
    pub fn new(
        id: AccountId,
        keypair: Keypair,
        directory: Vec<DirectoryEntry>,
        config: AnonConfig,
        rng_seed: u64,
    ) -> AnonLayer {
        let addr = directory
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.addr)
            .expect("own id listed in directory");
        let addr_of = directory.iter().map(|e| (e.id, e.addr)).collect();
        AnonLayer {
            id,
            addr,
            keypair,
            config,
            directory,
            addr_of,
            circuits: Vec::new(),
            old_circuits: Vec::new(),
            pending: BTreeMap::new(),
            next_slot: 0,
            recv_keys: BTreeMap::new(),
            link_keys: BTreeMap::new(),
            link_pending: BTreeMap::new(),
            link_exchanges: BTreeMap::new(),
            timers: BTreeMap::new(),
            seen: BTreeSet::new(),
            rng: ChaCha12Rng::seed_from_u64(rng_seed),
            next_exchange: 0,
            next_timer: ANON_TIMER_BASE,
            current_round: 0,
            rotated_at: None,
        }
    }

    pub fn own_addr(&self) -> Addr {
        self.addr
    }

    pub fn mode(&self) -> AnonMode {
        self.config.mode
    }

    pub fn circuits_ready(&self) -> usize {
        self.circuits.len()
    }

    pub fn circuits(&self) -> &[Circuit] {
        &self.circuits
    }

    /// The consensus peers this node disseminates to: the exits of its
    /// circuits, or every directory node when flooding.
    pub fn peers(&self) -> Vec<AccountId> {
        if self.config.mode == AnonMode::None {
            return self.other_ids();
        }
        let set: BTreeSet<AccountId> = self.sending_circuits().iter().map(|c| c.exit()).collect();
        if set.is_empty() {
            self.other_ids()
        } else {
            set.into_iter().collect()
        }
    }

    fn other_ids(&self) -> Vec<AccountId> {
        self.directory
            .iter()
            .map(|e| e.id)
            .filter(|i| *i != self.id)
            .collect()
    }

    fn sending_circuits(&self) -> &[Circuit] {
        if self.circuits.is_empty() {
            &self.old_circuits
        } else {
            &self.circuits
        }
    }

    /// Kick off circuit construction against the directory.
    pub fn start(&mut self, _now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        if self.config.mode == AnonMode::None {
            return actions;
        }
        for _ in 0..self.config.n_circuits {
            let slot = self.next_slot;
            self.next_slot += 1;
            self.begin_build(slot, 0, &mut actions);
        }
        actions
    }

    fn effective_hops(&self) -> usize {
        self.config.m_hops.min(self.directory.len().saturating_sub(1))
    }

    fn draw_route(&mut self) -> Vec<AccountId> {
        let m = self.effective_hops();
        let others = self.other_ids();
        // Prefer an exit no current or in-flight circuit uses, so peers stay
        // distinct while the directory allows it.
        let used: BTreeSet<AccountId> = self
            .circuits
            .iter()
            .map(|c| c.exit())
            .chain(self.pending.values().filter_map(|p| p.route.last().copied()))
            .collect();
        let unused: Vec<AccountId> = others.iter().copied().filter(|i| !used.contains(i)).collect();
        let exit = if unused.is_empty() {
            others[self.rng.gen_range(0..others.len())]
        } else {
            unused[self.rng.gen_range(0..unused.len())]
        };
        let mut relays: Vec<AccountId> = others.into_iter().filter(|i| *i != exit).collect();
        // Partial shuffle picking m-1 distinct relays.
        let mut route = Vec::with_capacity(m);
        for _ in 0..m.saturating_sub(1) {
            let at = self.rng.gen_range(0..relays.len());
            route.push(relays.swap_remove(at));
        }
        route.push(exit);
        route
    }

    fn begin_build(&mut self, slot: u64, attempts: u8, actions: &mut Vec<Action>) {
        if self.effective_hops() == 0 {
            actions.push(Action::Metric(MetricEvent::CircuitDegraded {
                built: self.circuits.len(),
                wanted: self.config.n_circuits,
            }));
            return;
        }
        let route = self.draw_route();
        let mut exchanges = BTreeMap::new();
        for (i, hop) in route.iter().enumerate() {
            let exchange_id = self.fresh_exchange_id();
            let initiator = KxInitiator::new(&mut self.rng);
            let predecessor = if i == 0 {
                self.addr
            } else {
                self.addr_of[&route[i - 1]]
            };
            let msg = NetMsg::KxInit {
                exchange_id,
                eph_pk: initiator.public(),
                predecessor,
            };
            actions.push(self.transport_frame(self.addr_of[hop], &msg));
            exchanges.insert(exchange_id, (i, initiator));
        }
        let timer_id = self.fresh_timer(TimerKind::CircuitBuild(slot));
        actions.push(Action::StartTimer {
            id: timer_id,
            delay_us: KX_TIMEOUT_US,
        });
        let keys = vec![None; route.len()];
        self.pending.insert(
            slot,
            PendingCircuit {
                route,
                keys,
                exchanges,
                attempts,
                timer_id,
            },
        );
    }

    fn fresh_exchange_id(&mut self) -> u64 {
        let id = (self.id << 40) | self.next_exchange;
        self.next_exchange += 1;
        id
    }

    fn fresh_timer(&mut self, kind: TimerKind) -> u64 {
        let id = self.next_timer;
        self.next_timer += 1;
        self.timers.insert(id, kind);
        id
    }

    fn transport_frame(&self, dst: Addr, msg: &NetMsg) -> Action {
        Action::SendFrame {
            dst,
            env: Envelope {
                kind: EnvelopeKind::Transport,
                src: self.addr,
                payload: msg.encode(),
            },
            about: None,
        }
    }

    /// Process a frame addressed to this node. Returns transport actions and
    /// any protocol messages to hand to the consensus engine.
    pub fn on_envelope(&mut self, env: Envelope, now_us: u64) -> (Vec<Action>, Vec<NetMsg>) {
        let mut actions = Vec::new();
        let mut inbound = Vec::new();
        match env.kind {
            EnvelopeKind::Transport => match NetMsg::decode(&env.payload) {
                Ok(NetMsg::KxInit {
                    exchange_id,
                    eph_pk,
                    predecessor,
                }) => {
                    let (key, dh_pk) = kx_respond(&self.keypair, &eph_pk);
                    self.recv_keys.entry(predecessor).or_default().push(key);
                    let sig = self
                        .keypair
                        .sign(&kx_ack_transcript(exchange_id, &eph_pk, &dh_pk));
                    let ack = NetMsg::KxAck {
                        exchange_id,
                        dh_pk,
                        sig,
                    };
                    actions.push(self.transport_frame(env.src, &ack));
                }
                Ok(NetMsg::KxAck {
                    exchange_id,
                    dh_pk,
                    sig,
                }) => {
                    self.handle_kx_ack(exchange_id, dh_pk, sig, env.src, &mut actions);
                }
                Ok(other) => inbound.push(other),
                Err(_) => actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                    reason: "malformed-transport",
                })),
            },
            EnvelopeKind::Plain => match NetMsg::decode(&env.payload) {
                Ok(msg) => self.consume(msg, now_us, &mut actions, &mut inbound),
                Err(_) => actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                    reason: "malformed-plain",
                })),
            },
            EnvelopeKind::LinkEncrypted => {
                match self.try_open_with_recv_keys(env.src, &env.payload) {
                    Some(bytes) => match NetMsg::decode(&bytes) {
                        Ok(msg) => self.consume(msg, now_us, &mut actions, &mut inbound),
                        Err(_) => actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                            reason: "malformed-link-payload",
                        })),
                    },
                    None => actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                        reason: "link-auth",
                    })),
                }
            }
            EnvelopeKind::Relay => {
                self.handle_relay(env, now_us, &mut actions, &mut inbound);
            }
        }
        (actions, inbound)
    }

    fn try_open_with_recv_keys(&self, src: Addr, sealed: &[u8]) -> Option<Vec<u8>> {
        let candidates = self.recv_keys.get(&src)?;
        // Newest keys first: rotation pushes fresh keys to the back.
        candidates
            .iter()
            .rev()
            .find_map(|k| crate::crypto::open(k, sealed).ok())
    }

    fn handle_relay(
        &mut self,
        env: Envelope,
        now_us: u64,
        actions: &mut Vec<Action>,
        inbound: &mut Vec<NetMsg>,
    ) {
        let Some(candidates) = self.recv_keys.get(&env.src) else {
            actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                reason: "relay-unknown-peer",
            }));
            return;
        };
        let peeled = candidates
            .iter()
            .rev()
            .find_map(|k| peel(k, &env.payload).ok());
        match peeled {
            Some(Peeled::Forward { next, inner }) => {
                actions.push(Action::SendFrame {
                    dst: next,
                    env: Envelope {
                        kind: EnvelopeKind::Relay,
                        src: self.addr,
                        payload: inner,
                    },
                    about: None,
                });
            }
            Some(Peeled::Exit { final_addr, msg }) => {
                if final_addr == self.addr {
                    match NetMsg::decode(&msg) {
                        Ok(m) => self.consume(m, now_us, actions, inbound),
                        Err(_) => actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                            reason: "malformed-exit-payload",
                        })),
                    }
                } else {
                    // TorLike delivery: hand the plaintext to the addressee.
                    let about = NetMsg::decode(&msg).ok().map(|m| m.gossip_digest());
                    actions.push(Action::SendFrame {
                        dst: final_addr,
                        env: Envelope {
                            kind: EnvelopeKind::Plain,
                            src: self.addr,
                            payload: msg,
                        },
                        about,
                    });
                }
            }
            None => actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                reason: "relay-auth",
            })),
        }
    }

    fn handle_kx_ack(
        &mut self,
        exchange_id: u64,
        dh_pk: [u8; 32],
        sig: crate::crypto::Signature,
        from: Addr,
        actions: &mut Vec<Action>,
    ) {
        // Link-key exchange?
        if let Some(peer) = self.link_exchanges.get(&exchange_id).copied() {
            if peer != from {
                return;
            }
            let Some(pending) = self.link_pending.get(&peer) else {
                return;
            };
            if pending.exchange_id != exchange_id {
                return;
            }
            let Some(entry) = self.directory.iter().find(|e| e.addr == peer) else {
                return;
            };
            let transcript = kx_ack_transcript(exchange_id, &pending.initiator.public(), &dh_pk);
            if !crate::crypto::verify(&entry.pk, &transcript, &sig) {
                actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                    reason: "kx-ack-signature",
                }));
                return;
            }
            let pending = self.link_pending.remove(&peer).expect("checked above");
            self.link_exchanges.remove(&exchange_id);
            self.timers.remove(&pending.timer_id);
            actions.push(Action::CancelTimer {
                id: pending.timer_id,
            });
            let key = pending.initiator.derive(&dh_pk);
            for (bytes, about) in pending.queued {
                let sealed = seal(&key, &bytes, &mut self.rng);
                actions.push(Action::SendFrame {
                    dst: peer,
                    env: Envelope {
                        kind: EnvelopeKind::LinkEncrypted,
                        src: self.addr,
                        payload: sealed,
                    },
                    about,
                });
            }
            self.link_keys.insert(peer, key);
            return;
        }

        // Circuit-hop exchange.
        let mut completed: Option<u64> = None;
        for (slot, pending) in self.pending.iter_mut() {
            let Some((hop_idx, initiator)) = pending.exchanges.get(&exchange_id) else {
                continue;
            };
            let hop_id = pending.route[*hop_idx];
            if self.addr_of[&hop_id] != from {
                return;
            }
            let entry = self
                .directory
                .iter()
                .find(|e| e.id == hop_id)
                .expect("route drawn from directory");
            let transcript = kx_ack_transcript(exchange_id, &initiator.public(), &dh_pk);
            if !crate::crypto::verify(&entry.pk, &transcript, &sig) {
                actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                    reason: "kx-ack-signature",
                }));
                return;
            }
            let key = initiator.derive(&dh_pk);
            let idx = *hop_idx;
            pending.keys[idx] = Some(key);
            pending.exchanges.remove(&exchange_id);
            if pending.keys.iter().all(|k| k.is_some()) {
                completed = Some(*slot);
            }
            break;
        }
        if let Some(slot) = completed {
            let pending = self.pending.remove(&slot).expect("just found");
            self.timers.remove(&pending.timer_id);
            actions.push(Action::CancelTimer {
                id: pending.timer_id,
            });
            let circuit = Circuit {
                hop_addrs: pending.route.iter().map(|h| self.addr_of[h]).collect(),
                keys: pending.keys.into_iter().map(|k| k.unwrap()).collect(),
                hops: pending.route,
                created_at_round: self.current_round,
            };
            self.circuits.push(circuit);
            actions.push(Action::Metric(MetricEvent::CircuitBuilt));
        }
    }

    pub fn on_timer(&mut self, id: u64, _now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        match self.timers.remove(&id) {
            Some(TimerKind::CircuitBuild(slot)) => {
                if let Some(pending) = self.pending.remove(&slot) {
                    if pending.attempts + 1 < MAX_BUILD_ATTEMPTS {
                        self.begin_build(slot, pending.attempts + 1, &mut actions);
                    } else {
                        actions.push(Action::Metric(MetricEvent::CircuitDegraded {
                            built: self.circuits.len(),
                            wanted: self.config.n_circuits,
                        }));
                    }
                }
            }
            Some(TimerKind::LinkBuild(peer)) => {
                if let Some(mut pending) = self.link_pending.remove(&peer) {
                    self.link_exchanges.remove(&pending.exchange_id);
                    if pending.attempts + 1 < MAX_BUILD_ATTEMPTS {
                        let exchange_id = self.fresh_exchange_id();
                        let initiator = KxInitiator::new(&mut self.rng);
                        let msg = NetMsg::KxInit {
                            exchange_id,
                            eph_pk: initiator.public(),
                            predecessor: self.addr,
                        };
                        actions.push(self.transport_frame(peer, &msg));
                        let timer_id = self.fresh_timer(TimerKind::LinkBuild(peer));
                        actions.push(Action::StartTimer {
                            id: timer_id,
                            delay_us: KX_TIMEOUT_US,
                        });
                        pending.exchange_id = exchange_id;
                        pending.initiator = initiator;
                        pending.attempts += 1;
                        pending.timer_id = timer_id;
                        self.link_exchanges.insert(exchange_id, peer);
                        self.link_pending.insert(peer, pending);
                    } else {
                        actions.push(Action::Metric(MetricEvent::EnvelopeDropped {
                            reason: "link-kx-failed",
                        }));
                    }
                }
            }
            None => {}
        }
        actions
    }

    /// Originate a gossip message (a block, transaction, or vote this node
    /// itself produced or injected).
    pub fn gossip(&mut self, msg: &NetMsg, _now_us: u64) -> Vec<Action> {
        let digest = msg.gossip_digest();
        self.seen.insert(digest);
        let mut actions = Vec::new();
        self.forward(&msg.encode(), digest, true, &mut actions);
        actions
    }

    /// Keep a received-and-validated message flooding. Invalid messages are
    /// never forwarded; the consensus engine makes that call, so forwarding
    /// is a separate entry point from delivery.
    pub fn forward_received(&mut self, msg: &NetMsg, _now_us: u64) -> Vec<Action> {
        let digest = msg.gossip_digest();
        self.seen.insert(digest);
        let mut actions = Vec::new();
        self.forward(&msg.encode(), digest, false, &mut actions);
        actions
    }

    /// Point-to-point control traffic (catch-up sync), sent in a Transport
    /// envelope outside the gossip layer.
    pub fn send_control(&mut self, dst: AccountId, msg: &NetMsg) -> Vec<Action> {
        match self.addr_of.get(&dst) {
            Some(addr) => vec![self.transport_frame(*addr, msg)],
            None => Vec::new(),
        }
    }

    /// Round boundary: drop the grace-period circuits once fresh ones exist
    /// and trigger rotation when the period elapses.
    pub fn on_round(&mut self, round: u64, _now_us: u64) -> Vec<Action> {
        self.current_round = round;
        let mut actions = Vec::new();
        if let Some(rotated) = self.rotated_at {
            if round > rotated && !self.circuits.is_empty() {
                self.old_circuits.clear();
                self.rotated_at = None;
            }
        }
        if self.config.mode != AnonMode::None {
            if let Some(period) = self.config.rotation_period {
                if period > 0 && round > 0 && round % period == 0 {
                    self.rotate(round, &mut actions);
                }
            }
        }
        actions
    }

    fn rotate(&mut self, round: u64, actions: &mut Vec<Action>) {
        self.old_circuits = std::mem::take(&mut self.circuits);
        self.rotated_at = Some(round);
        // Abandon half-built circuits; their timers become no-ops.
        for (_, p) in std::mem::take(&mut self.pending) {
            self.timers.remove(&p.timer_id);
        }
        for _ in 0..self.config.n_circuits {
            let slot = self.next_slot;
            self.next_slot += 1;
            self.begin_build(slot, 0, actions);
        }
    }

    /// First-delivery handling: deduplicate and hand the message up. The
    /// engine re-forwards it via [`Self::forward_received`] if it validates.
    fn consume(
        &mut self,
        msg: NetMsg,
        _now_us: u64,
        _actions: &mut [Action],
        inbound: &mut Vec<NetMsg>,
    ) {
        if !msg.is_gossip() {
            inbound.push(msg);
            return;
        }
        let digest = msg.gossip_digest();
        if !self.seen.contains(&digest) {
            inbound.push(msg);
        }
    }

    /// Mark a digest as seen without forwarding (used once the engine has
    /// looked at a delivery, whether or not it validated).
    pub fn mark_seen(&mut self, digest: Digest) {
        self.seen.insert(digest);
    }

    fn forward(
        &mut self,
        bytes: &[u8],
        digest: Digest,
        originating: bool,
        actions: &mut Vec<Action>,
    ) {
        match self.config.mode {
            AnonMode::None => self.flood_plain(bytes, digest, actions),
            AnonMode::TorLike => {
                if self.sending_circuits().is_empty() {
                    actions.push(Action::Metric(MetricEvent::GossipFallback));
                    self.flood_plain(bytes, digest, actions);
                    return;
                }
                // One onion-routed copy per consensus peer, each through a
                // randomly chosen circuit.
                for peer in self.peers() {
                    let dst = self.addr_of[&peer];
                    let n = self.sending_circuits().len();
                    let pick = self.rng.gen_range(0..n);
                    let circuit = &self.sending_circuits()[pick];
                    let payload = onion_wrap(
                        &circuit.hop_addrs.clone(),
                        &circuit.keys.clone(),
                        dst,
                        bytes,
                        &mut self.rng,
                    );
                    let first = self.sending_circuits()[pick].hop_addrs[0];
                    actions.push(Action::SendFrame {
                        dst: first,
                        env: Envelope {
                            kind: EnvelopeKind::Relay,
                            src: self.addr,
                            payload,
                        },
                        about: Some(digest),
                    });
                }
            }
            AnonMode::GossipNode | AnonMode::Dandelion => {
                if originating {
                    // Stem: one copy down each circuit, addressed to its exit.
                    if self.sending_circuits().is_empty() {
                        actions.push(Action::Metric(MetricEvent::GossipFallback));
                        self.flood_plain(bytes, digest, actions);
                        return;
                    }
                    for i in 0..self.sending_circuits().len() {
                        let circuit = &self.sending_circuits()[i];
                        let exit_addr = *circuit.hop_addrs.last().unwrap();
                        let (hop_addrs, keys, first) = (
                            circuit.hop_addrs.clone(),
                            circuit.keys.clone(),
                            circuit.hop_addrs[0],
                        );
                        let payload = onion_wrap(&hop_addrs, &keys, exit_addr, bytes, &mut self.rng);
                        actions.push(Action::SendFrame {
                            dst: first,
                            env: Envelope {
                                kind: EnvelopeKind::Relay,
                                src: self.addr,
                                payload,
                            },
                            about: Some(digest),
                        });
                    }
                } else if self.config.mode == AnonMode::Dandelion {
                    // Fluff: cleartext to the consensus peers.
                    for peer in self.peers() {
                        let dst = self.addr_of[&peer];
                        actions.push(Action::SendFrame {
                            dst,
                            env: Envelope {
                                kind: EnvelopeKind::Plain,
                                src: self.addr,
                                payload: bytes.to_vec(),
                            },
                            about: Some(digest),
                        });
                    }
                } else {
                    // GossipNode fluff: sealed under pairwise link keys.
                    for peer in self.peers() {
                        let dst = self.addr_of[&peer];
                        self.send_link_encrypted(dst, bytes.to_vec(), Some(digest), actions);
                    }
                }
            }
        }
    }

    fn flood_plain(&mut self, bytes: &[u8], digest: Digest, actions: &mut Vec<Action>) {
        for other in self.other_ids() {
            let dst = self.addr_of[&other];
            actions.push(Action::SendFrame {
                dst,
                env: Envelope {
                    kind: EnvelopeKind::Plain,
                    src: self.addr,
                    payload: bytes.to_vec(),
                },
                about: Some(digest),
            });
        }
    }

    fn send_link_encrypted(
        &mut self,
        dst: Addr,
        bytes: Vec<u8>,
        about: Option<Digest>,
        actions: &mut Vec<Action>,
    ) {
        if let Some(key) = self.link_keys.get(&dst) {
            let sealed = seal(key, &bytes, &mut self.rng);
            actions.push(Action::SendFrame {
                dst,
                env: Envelope {
                    kind: EnvelopeKind::LinkEncrypted,
                    src: self.addr,
                    payload: sealed,
                },
                about,
            });
            return;
        }
        if let Some(pending) = self.link_pending.get_mut(&dst) {
            pending.queued.push((bytes, about));
            return;
        }
        // First contact: establish the pairwise key, queue the message.
        let exchange_id = self.fresh_exchange_id();
        let initiator = KxInitiator::new(&mut self.rng);
        let msg = NetMsg::KxInit {
            exchange_id,
            eph_pk: initiator.public(),
            predecessor: self.addr,
        };
        actions.push(self.transport_frame(dst, &msg));
        let timer_id = self.fresh_timer(TimerKind::LinkBuild(dst));
        actions.push(Action::StartTimer {
            id: timer_id,
            delay_us: KX_TIMEOUT_US,
        });
        self.link_exchanges.insert(exchange_id, dst);
        self.link_pending.insert(
            dst,
            PendingLink {
                exchange_id,
                initiator,
                queued: vec![(bytes, about)],
                attempts: 0,
                timer_id,
            },
        );
    }
}
