//! Deterministic discrete-event simulation: all nodes share one virtual
//! clock, every frame and timer is an event in one ordered queue, and all
//! randomness (latency draws, drops, injection choices, node RNGs) flows
//! from the scenario seed. Two runs of the same config produce identical
//! metrics byte for byte.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::crypto::{Digest, Keypair, Signature};
use crate::genesis::Genesis;
use crate::ledger::{AccountId, Block, Height, Tx, TxKind};
use crate::node::{Action, MetricEvent, ProtocolNode};
use crate::wire::{Addr, EnvelopeKind, NetMsg};

use super::capture::{CaptureRecord, LinkCapture};
use super::metrics::{MetricsRecord, RoundRow, Summary};
use super::scenario::{LatencyModel, ScenarioConfig, ScenarioError};

enum EventKind {
    Frame { dst: usize, bytes: Vec<u8> },
    Timer { node: usize, id: u64 },
    Inject,
    ChurnOffline { node: usize },
    ChurnOnline { node: usize },
}

struct Event {
    t_us: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.t_us == other.t_us && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap, we want earliest-first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t_us, other.seq).cmp(&(self.t_us, self.seq))
    }
}

/// Everything a finished run hands back for analysis.
pub struct SimOutcome {
    pub metrics: MetricsRecord,
    pub capture: LinkCapture,
    pub nodes: Vec<ProtocolNode>,
    pub genesis: Genesis,
    /// (gossip digest, producer) for each block on the observer's chain.
    pub truth: Vec<(Digest, AccountId)>,
    pub node_bytes_sent: Vec<u64>,
}

impl SimOutcome {
    pub fn best_state_roots(&self) -> Vec<Digest> {
        self.nodes
            .iter()
            .map(|n| n.engine.state().state_root())
            .collect()
    }

    pub fn finalized_heights(&self) -> Vec<Height> {
        self.nodes
            .iter()
            .map(|n| n.engine.finalized_height())
            .collect()
    }

    pub fn finalized_state_roots(&self) -> Vec<Digest> {
        self.nodes
            .iter()
            .map(|n| n.engine.state_root_at_finalized())
            .collect()
    }

    pub fn node_of_addr(&self) -> BTreeMap<Addr, AccountId> {
        self.genesis
            .directory
            .iter()
            .map(|e| (e.addr, e.id))
            .collect()
    }

    pub fn observer_chain(&self) -> Vec<Block> {
        chain_blocks(&self.nodes[0])
    }
}

fn chain_blocks(node: &ProtocolNode) -> Vec<Block> {
    node.engine
        .chain_headers()
        .iter()
        .filter_map(|h| node.engine.block_at(&h.digest()))
        .collect()
}

struct ClientState {
    keypair: Keypair,
}

struct BlockLog {
    t_us: u64,
    bytes_at: u64,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    nodes: Vec<ProtocolNode>,
    online: Vec<bool>,
    heap: BinaryHeap<Event>,
    seq: u64,
    capture: LinkCapture,
    node_bytes_sent: Vec<u64>,
    addr_to_node: BTreeMap<Addr, usize>,
    net_rng: ChaCha12Rng,
    inject_rng: ChaCha12Rng,
    clients: Vec<ClientState>,
    client_cursor: usize,
    inject_period_us: u64,
    block_log: BTreeMap<Digest, BlockLog>,
    // Observer (node 0) protocol counters; byte/frame/drop counters are
    // network-global.
    observer: ObserverCounters,
    envelope_drops: u64,
    offline_drops: u64,
    net_drops: u64,
    forced_offline: Option<usize>,
}

#[derive(Default)]
struct ObserverCounters {
    timeouts: u64,
    fork_blocks: u64,
    tip_switches: u64,
    checkpoints_finalized: u64,
    checkpoints_nodecision: u64,
    txs_rejected: u64,
}

/// Run one scenario to completion on the simulated transport.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimOutcome, ScenarioError> {
    cfg.validate()?;
    let genesis = cfg.genesis();
    let params = cfg.params();
    let n = cfg.node_count;

    let nodes: Vec<ProtocolNode> = (0..n as u64)
        .map(|i| {
            ProtocolNode::new(
                &genesis,
                i,
                cfg.node_keypair(i),
                params,
                cfg.anon_config(),
                cfg.rng_seed ^ 0x9e3779b97f4a7c15u64.wrapping_mul(i + 1),
            )
        })
        .collect();

    let mut sim = Sim {
        cfg,
        online: vec![true; n],
        heap: BinaryHeap::new(),
        seq: 0,
        capture: LinkCapture::new(cfg.record_capture),
        node_bytes_sent: vec![0; n],
        addr_to_node: genesis
            .directory
            .iter()
            .enumerate()
            .map(|(i, e)| (e.addr, i))
            .collect(),
        net_rng: ChaCha12Rng::seed_from_u64(cfg.rng_seed ^ 0x6e65745f726e67),
        inject_rng: ChaCha12Rng::seed_from_u64(cfg.rng_seed ^ 0x696e6a656374),
        clients: (0..cfg.client_accounts as u64)
            .map(|c| ClientState {
                keypair: cfg.client_keypair(c),
            })
            .collect(),
        client_cursor: 0,
        inject_period_us: if cfg.tx_injection_rate > 0.0 {
            ((1_000_000.0 / cfg.tx_injection_rate) as u64).max(1)
        } else {
            0
        },
        block_log: BTreeMap::new(),
        observer: ObserverCounters::default(),
        envelope_drops: 0,
        offline_drops: 0,
        net_drops: 0,
        forced_offline: None,
        nodes,
    };

    for ev in &cfg.churn {
        sim.schedule(
            ev.offline_at_ms * 1000,
            EventKind::ChurnOffline {
                node: ev.node as usize,
            },
        );
        sim.schedule(
            ev.online_at_ms * 1000,
            EventKind::ChurnOnline {
                node: ev.node as usize,
            },
        );
    }
    if sim.inject_period_us > 0 {
        sim.schedule(sim.inject_period_us, EventKind::Inject);
    }
    for i in 0..n {
        let actions = sim.nodes[i].start(0);
        sim.absorb(i, actions, 0);
    }

    let duration_us = cfg.duration_ms * 1000;
    let mut now = 0u64;
    let mut drain_deadline: Option<u64> = None;
    while let Some(ev) = sim.heap.pop() {
        if ev.t_us > duration_us || drain_deadline.is_some_and(|d| ev.t_us > d) {
            break;
        }
        now = ev.t_us;
        match ev.kind {
            EventKind::Frame { dst, bytes } => {
                if !sim.online[dst] {
                    sim.offline_drops += 1;
                    continue;
                }
                let actions = sim.nodes[dst].on_frame(&bytes, now);
                sim.absorb(dst, actions, now);
            }
            EventKind::Timer { node, id } => {
                if !sim.online[node] {
                    continue;
                }
                let actions = sim.nodes[node].on_timer(id, now);
                sim.absorb(node, actions, now);
            }
            EventKind::Inject => {
                if drain_deadline.is_none() {
                    if let Some((target, tx)) = sim.plan_injection() {
                        let actions = sim.nodes[target].on_inject_tx(tx, now);
                        sim.absorb(target, actions, now);
                    }
                    let at = now + sim.inject_period_us;
                    sim.schedule(at, EventKind::Inject);
                }
            }
            EventKind::ChurnOffline { node } => {
                sim.online[node] = false;
                sim.nodes[node].on_pause();
            }
            EventKind::ChurnOnline { node } => {
                sim.online[node] = true;
                let actions = sim.nodes[node].on_resume(now);
                sim.absorb(node, actions, now);
            }
        }
        if let (Some(max_rounds), None) = (cfg.max_rounds, drain_deadline) {
            if sim.nodes[0].engine.best_height() >= max_rounds {
                // Let in-flight traffic land so every node settles.
                drain_deadline = Some(now + 4 * params.block_timeout_us);
            }
        }
    }
    let elapsed_us = now.min(duration_us);
    Ok(sim.finish(genesis, elapsed_us))
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, t_us: u64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Event { t_us, seq, kind });
    }

    fn draw_latency_us(&mut self) -> u64 {
        match self.cfg.latency {
            LatencyModel::FixedMs(ms) => ms * 1000,
            LatencyModel::UniformMs { min, max } => self.net_rng.gen_range(min * 1000..=max * 1000),
        }
    }

    fn send(&mut self, from_node: usize, dst: Addr, env: crate::wire::Envelope, about: Option<Digest>, t_us: u64) {
        let bytes = env.encode();
        self.node_bytes_sent[from_node] += bytes.len() as u64;
        self.capture.observe(CaptureRecord {
            t_us,
            src: env.src,
            dst,
            kind: env.kind,
            size: bytes.len(),
            plaintext: env.kind == EnvelopeKind::Plain,
            about,
        });
        if self.cfg.drop_rate > 0.0 && self.net_rng.gen::<f64>() < self.cfg.drop_rate {
            self.net_drops += 1;
            return;
        }
        let Some(&dst_node) = self.addr_to_node.get(&dst) else {
            self.net_drops += 1;
            return;
        };
        let latency = self.draw_latency_us();
        self.schedule(
            t_us + latency,
            EventKind::Frame {
                dst: dst_node,
                bytes,
            },
        );
    }

    /// Apply one node's actions and aggregate its metric events; also drives
    /// the leader-targeted churn window.
    fn absorb(&mut self, node: usize, actions: Vec<Action>, t_us: u64) {
        let mut created_heights: Vec<Height> = Vec::new();
        for action in actions {
            match action {
                Action::SendFrame { dst, env, about } => self.send(node, dst, env, about, t_us),
                Action::StartTimer { id, delay_us } => {
                    self.schedule(t_us + delay_us, EventKind::Timer { node, id });
                }
                Action::CancelTimer { .. } => {} // engines ignore stale fires
                Action::Metric(ev) => {
                    match &ev {
                        MetricEvent::BlockCreated { digest, height, .. } => {
                            let bytes_at = self.capture.bytes_total;
                            self.block_log.entry(*digest).or_insert(BlockLog {
                                t_us,
                                bytes_at,
                            });
                            created_heights.push(*height);
                        }
                        MetricEvent::EnvelopeDropped { .. } => self.envelope_drops += 1,
                        _ => {}
                    }
                    if node == 0 {
                        match &ev {
                            MetricEvent::TimeoutExpired { .. } => self.observer.timeouts += 1,
                            MetricEvent::ForkBlockTracked { .. } => self.observer.fork_blocks += 1,
                            MetricEvent::TipSwitch { .. } => self.observer.tip_switches += 1,
                            MetricEvent::CheckpointFinalized { .. } => {
                                self.observer.checkpoints_finalized += 1
                            }
                            MetricEvent::CheckpointNoDecision { .. } => {
                                self.observer.checkpoints_nodecision += 1
                            }
                            MetricEvent::TxRejected { .. } => self.observer.txs_rejected += 1,
                            _ => {}
                        }
                    }
                }
            }
        }
        for h in created_heights {
            self.leader_churn_hook(node, h, t_us);
        }
    }

    /// When block h exists, the round-(h+1) leader is known: inside the
    /// scripted window that leader goes dark until its round is over.
    fn leader_churn_hook(&mut self, creator: usize, created_height: Height, t_us: u64) {
        let Some((from, to)) = self.cfg.leader_offline_rounds else {
            return;
        };
        if let Some(prev) = self.forced_offline.take() {
            self.online[prev] = true;
            let actions = self.nodes[prev].on_resume(t_us);
            // Bounded re-entry: a resume emits control traffic, never a
            // BlockCreated.
            self.absorb(prev, actions, t_us);
        }
        let next_round = created_height + 1;
        if next_round >= from && next_round <= to {
            if let Some(leader) = self.nodes[creator].engine.next_leader() {
                let target = leader as usize;
                self.online[target] = false;
                self.nodes[target].on_pause();
                self.forced_offline = Some(target);
            }
        }
    }

    /// Pick a target node and a free client account; `None` when every
    /// client already has a transaction pending (back pressure) or no node
    /// is online.
    fn plan_injection(&mut self) -> Option<(usize, Tx)> {
        if self.clients.is_empty() {
            return None;
        }
        let candidates: Vec<usize> = (0..self.nodes.len()).filter(|i| self.online[*i]).collect();
        if candidates.is_empty() {
            return None;
        }
        let target = candidates[self.inject_rng.gen_range(0..candidates.len())];
        let engine = &self.nodes[target].engine;
        for k in 0..self.clients.len() {
            let idx = (self.client_cursor + k) % self.clients.len();
            let pk = self.clients[idx].keypair.public();
            if engine.mempool_has_sender(&pk) {
                continue;
            }
            let Some(account) = engine.state().account_by_pk(&pk) else {
                continue;
            };
            self.client_cursor = idx + 1;
            let dst = self.clients[(idx + 1) % self.clients.len()].keypair.public();
            let vote_ref = if self.cfg.vote_tx_fraction > 0.0
                && self.inject_rng.gen::<f64>() < self.cfg.vote_tx_fraction
            {
                Some(engine.best_digest())
            } else {
                None
            };
            let mut tx = Tx {
                kind: TxKind::Transfer,
                src: pk,
                dst,
                val: 1,
                fee: 1 + self.inject_rng.gen_range(0..10),
                nonce: account.nonce,
                vote_ref,
                sig: Signature::ZERO,
            };
            tx.sign_with(&self.clients[idx].keypair);
            return Some((target, tx));
        }
        None
    }

    fn finish(self, genesis: Genesis, elapsed_us: u64) -> SimOutcome {
        let observer_chain = chain_blocks(&self.nodes[0]);
        let mut rows: Vec<RoundRow> = Vec::with_capacity(observer_chain.len());
        let mut truth = Vec::with_capacity(observer_chain.len());
        let mut prev_t = 0u64;
        let mut prev_bytes = 0u64;
        for block in &observer_chain {
            let digest = block.digest();
            let producer = self.nodes[0]
                .engine
                .state()
                .id_of(&block.header.coinbase)
                .unwrap_or(u64::MAX);
            let (t_us, bytes_at) = self
                .block_log
                .get(&digest)
                .map(|l| (l.t_us, l.bytes_at))
                .unwrap_or((prev_t, prev_bytes));
            rows.push(RoundRow {
                height: block.header.id,
                producer,
                alt_idx: block.header.alt_idx,
                tx_count: block.txs.len(),
                round_ms: t_us.saturating_sub(prev_t) / 1000,
                bytes: bytes_at.saturating_sub(prev_bytes),
            });
            truth.push((NetMsg::Block(block.clone()).gossip_digest(), producer));
            prev_t = t_us.max(prev_t);
            prev_bytes = bytes_at.max(prev_bytes);
        }

        let total_txs: u64 = rows.iter().map(|r| r.tx_count as u64).sum();
        let elapsed_ms = elapsed_us / 1000;
        let throughput_tps = if elapsed_ms > 0 {
            total_txs as f64 / (elapsed_ms as f64 / 1000.0)
        } else {
            0.0
        };
        let metrics = MetricsRecord {
            summary: Summary {
                total_blocks: rows.len() as u64,
                total_txs,
                elapsed_ms,
                throughput_tps,
                timeouts: self.observer.timeouts,
                fork_blocks: self.observer.fork_blocks,
                tip_switches: self.observer.tip_switches,
                checkpoints_finalized: self.observer.checkpoints_finalized,
                checkpoints_nodecision: self.observer.checkpoints_nodecision,
                bytes_total: self.capture.bytes_total,
                frames_total: self.capture.frames_total,
                drops: self.net_drops + self.offline_drops + self.envelope_drops,
                txs_rejected: self.observer.txs_rejected,
            },
            rows,
        };

        SimOutcome {
            metrics,
            capture: self.capture,
            node_bytes_sent: self.node_bytes_sent,
            nodes: self.nodes,
            genesis,
            truth,
        }
    }
}
