//! The per-node consensus state machine: round lifecycle, block production
//! and validation, timeout-driven alternative leadership, the mempool, and
//! rewards.
//!
//! The engine is sans-io. It consumes protocol messages and timer
//! expirations, returns messages to gossip or send point-to-point, and
//! buffers timer/metric requests for the runtime to apply. One round works
//! like this: after a block is accepted the timeout counter resets and the
//! node checks whether the new randomness elects it; the elected leader
//! builds and gossips the next block while everyone else arms the block
//! timeout. Each expiration bumps the counter and shifts leadership to the
//! next alternative.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::crypto::{Digest, Keypair, PublicKey};
use crate::election::{
    checkpoint_seed, elect, elect_committee, election_rand, reduce_rand, round_randomness,
    verify_round_randomness, ElectionParams,
};
use crate::forkchoice::{tally_votes, CheckpointVote, ForkError, ForkTracker};
use crate::genesis::Genesis;
use crate::ledger::{
    compute_txs_root, AccountId, Block, ChainRules, GlobalState, Header, Height, Tx,
};
use crate::node::{Action, MetricEvent};
use crate::wire::{NetMsg, SYNC_BATCH_LIMIT};

/// Protocol constants every node must share.
#[derive(Clone, Copy, Debug)]
pub struct ProtocolParams {
    /// τ: how long to wait for the round's block before promoting the next
    /// alternative leader.
    pub block_timeout_us: u64,
    /// Lower bound on the spacing between consecutive blocks this node
    /// produces (0 = as fast as gossip allows).
    pub min_block_interval_us: u64,
    pub full_reward: u64,
    pub partial_reward: u64,
    /// Desired number of alternative leaders per round.
    pub alt_count: u16,
    pub max_block_txs: usize,
    /// Checkpoint every this many blocks.
    pub checkpoint_interval: u64,
    pub committee_size: usize,
    /// Delay before round 1 starts, giving circuits time to build.
    pub bootstrap_delay_us: u64,
}

impl Default for ProtocolParams {
    fn default() -> ProtocolParams {
        ProtocolParams {
            block_timeout_us: 500_000,
            min_block_interval_us: 0,
            full_reward: 10,
            partial_reward: 1,
            alt_count: 3,
            max_block_txs: 30,
            checkpoint_interval: 10,
            committee_size: 5,
            bootstrap_delay_us: 500_000,
        }
    }
}

/// Messages the engine wants sent after handling one event.
#[derive(Default)]
pub struct Outbound {
    /// Gossip messages; the flag is true when this node originated the
    /// message (stem phase) rather than forwarding a validated one.
    pub gossip: Vec<(NetMsg, bool)>,
    /// Point-to-point control messages.
    pub direct: Vec<(AccountId, NetMsg)>,
    /// Heights whose round began during this event (drives circuit
    /// rotation).
    pub rounds_started: Vec<Height>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Bootstrap,
    RoundTimeout,
    CreateBlock { alt_idx: u16, height: Height },
    Checkpoint { height: Height },
    SyncRetry,
}

/// Fee-descending, then first-in-first-out.
#[derive(Default)]
struct Mempool {
    by_priority: BTreeMap<(std::cmp::Reverse<u64>, u64), Tx>,
    index: BTreeMap<Digest, (std::cmp::Reverse<u64>, u64, Height)>,
    senders: BTreeMap<PublicKey, u32>,
    seq: u64,
}

impl Mempool {
    fn insert(&mut self, tx: Tx, height: Height) -> bool {
        let digest = tx.digest();
        if self.index.contains_key(&digest) {
            return false;
        }
        let key = (std::cmp::Reverse(tx.fee), self.seq);
        self.seq += 1;
        self.index.insert(digest, (key.0, key.1, height));
        *self.senders.entry(tx.src).or_default() += 1;
        self.by_priority.insert(key, tx);
        true
    }

    fn contains(&self, digest: &Digest) -> bool {
        self.index.contains_key(digest)
    }

    fn has_sender(&self, pk: &PublicKey) -> bool {
        self.senders.contains_key(pk)
    }

    fn remove(&mut self, digest: &Digest) {
        if let Some((fee, seq, _)) = self.index.remove(digest) {
            if let Some(tx) = self.by_priority.remove(&(fee, seq)) {
                if let Some(n) = self.senders.get_mut(&tx.src) {
                    *n -= 1;
                    if *n == 0 {
                        self.senders.remove(&tx.src);
                    }
                }
            }
        }
    }

    fn iter(&self) -> impl Iterator<Item = &Tx> {
        self.by_priority.values()
    }

    fn len(&self) -> usize {
        self.by_priority.len()
    }

    fn retain(&mut self, mut keep: impl FnMut(&Tx, Height) -> bool) {
        let doomed: Vec<Digest> = self
            .by_priority
            .iter()
            .filter_map(|(key, tx)| {
                let digest = tx.digest();
                let inserted_at = self.index[&digest].2;
                if keep(tx, inserted_at) {
                    None
                } else {
                    let _ = key;
                    Some(digest)
                }
            })
            .collect();
        for d in doomed {
            self.remove(&d);
        }
    }
}

pub struct Engine {
    id: AccountId,
    keypair: Keypair,
    params: ProtocolParams,
    rules: ChainRules,
    election: ElectionParams,
    node_pks: BTreeMap<AccountId, PublicKey>,

    genesis_header: Header,
    genesis_digest: Digest,
    genesis_supply: u64,

    /// Finalized linear history (height 1 onward; genesis is implicit).
    archive: Vec<Block>,
    archived: BTreeMap<Digest, Height>,
    tracker: ForkTracker,
    /// Tip of the best chain (`BLast` in round terms).
    best: Digest,
    best_height: Height,
    /// State after executing the best tip.
    gs: GlobalState,
    state_at_finalized: GlobalState,
    minted_open: BTreeMap<Digest, u64>,
    minted_finalized: u64,

    round_expirations: u16,
    last_block_at_us: u64,
    started: bool,
    online: bool,

    mempool: Mempool,
    orphans: BTreeMap<Digest, Vec<Block>>,
    sync_in_flight: bool,

    votes: BTreeMap<Height, BTreeMap<AccountId, CheckpointVote>>,
    checkpoint_done: Height,

    timers: BTreeMap<u64, TimerKind>,
    next_timer: u64,
    round_timer: Option<u64>,
    create_timer: Option<u64>,
    sync_timer: Option<u64>,

    actions: Vec<Action>,
    rng: ChaCha12Rng,
}

impl Engine {
    pub fn new(genesis: &Genesis, id: AccountId, keypair: Keypair, params: ProtocolParams) -> Engine {
        let gs = genesis.initial_state();
        let genesis_header = genesis.genesis_header();
        let genesis_digest = genesis_header.digest();
        Engine {
            id,
            election: ElectionParams::production(params.alt_count),
            rules: genesis.rules,
            node_pks: genesis.directory.iter().map(|e| (e.id, e.pk)).collect(),
            genesis_supply: gs.total_supply(),
            state_at_finalized: gs.clone(),
            tracker: ForkTracker::new(genesis_digest, 0),
            best: genesis_digest,
            best_height: 0,
            genesis_header,
            genesis_digest,
            gs,
            keypair,
            params,
            archive: Vec::new(),
            archived: BTreeMap::new(),
            minted_open: BTreeMap::new(),
            minted_finalized: 0,
            round_expirations: 0,
            last_block_at_us: 0,
            started: false,
            online: true,
            mempool: Mempool::default(),
            orphans: BTreeMap::new(),
            sync_in_flight: false,
            votes: BTreeMap::new(),
            checkpoint_done: 0,
            timers: BTreeMap::new(),
            next_timer: 1,
            round_timer: None,
            create_timer: None,
            sync_timer: None,
            actions: Vec::new(),
            rng: ChaCha12Rng::seed_from_u64(id ^ 0x5eed),
        }
    }

    // --- accessors used by runtimes and tests ---

    pub fn node_id(&self) -> AccountId {
        self.id
    }

    pub fn best_digest(&self) -> Digest {
        self.best
    }

    pub fn best_height(&self) -> Height {
        self.best_height
    }

    pub fn finalized_digest(&self) -> Digest {
        self.tracker.finalized()
    }

    pub fn finalized_height(&self) -> Height {
        self.tracker.finalized_height()
    }

    pub fn state(&self) -> &GlobalState {
        &self.gs
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn mempool_has(&self, digest: &Digest) -> bool {
        self.mempool.contains(digest)
    }

    pub fn mempool_has_sender(&self, pk: &PublicKey) -> bool {
        self.mempool.has_sender(pk)
    }

    /// The main leader the current best tip elects for the next round.
    pub fn next_leader(&self) -> Option<AccountId> {
        let rand = election_rand(&self.best_header().rand, &self.election.max);
        elect(&rand, 0, &self.gs.active_stakes(), &self.election)
            .ok()
            .map(|set| set.leader)
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    /// Headers of the best chain from height 1 to the tip.
    pub fn chain_headers(&self) -> Vec<Header> {
        let mut out: Vec<Header> = self.archive.iter().map(|b| b.header.clone()).collect();
        if let Some(path) = self.tracker.path_from_finalized(&self.best) {
            for d in path {
                out.push(self.tracker.get(&d).expect("path blocks tracked").block.header.clone());
            }
        }
        out
    }

    pub fn block_at(&self, digest: &Digest) -> Option<Block> {
        if let Some(h) = self.archived.get(digest) {
            return self.archive.get((*h - 1) as usize).cloned();
        }
        self.tracker.get(digest).map(|t| t.block.clone())
    }

    /// Exact token conservation: current supply must equal the genesis
    /// supply plus everything minted along the best chain.
    pub fn audit_supply(&self) -> Result<(), String> {
        let mut minted = self.minted_finalized;
        if let Some(path) = self.tracker.path_from_finalized(&self.best) {
            for d in path {
                minted += self.minted_open.get(&d).copied().unwrap_or(0);
            }
        }
        let expected = self.genesis_supply + minted;
        let actual = self.gs.total_supply();
        if expected == actual {
            Ok(())
        } else {
            Err(format!("supply {actual} != genesis + minted {expected}"))
        }
    }

    pub fn state_root_at_finalized(&self) -> Digest {
        self.state_at_finalized.state_root()
    }

    // --- event entry points ---

    pub fn take_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }

    pub fn start(&mut self, now_us: u64) -> Outbound {
        let mut out = Outbound::default();
        self.started = true;
        self.online = true;
        self.last_block_at_us = now_us;
        if self.params.bootstrap_delay_us == 0 {
            self.round_start(now_us, &mut out);
        } else {
            let id = self.arm_timer(TimerKind::Bootstrap, self.params.bootstrap_delay_us);
            let _ = id;
        }
        out
    }

    pub fn pause(&mut self) {
        self.online = false;
        self.timers.clear();
        self.round_timer = None;
        self.create_timer = None;
        self.sync_timer = None;
        self.sync_in_flight = false;
        self.orphans.clear();
    }

    pub fn resume(&mut self, now_us: u64) -> Outbound {
        let mut out = Outbound::default();
        self.online = true;
        self.round_expirations = 0;
        self.last_block_at_us = now_us;
        // Ask a peer what we missed before producing anything; the round
        // restarts when the response lands (or immediately if nothing did).
        self.request_sync(&mut out);
        out
    }

    pub fn on_timer(&mut self, id: u64, now_us: u64) -> Outbound {
        let mut out = Outbound::default();
        if !self.online {
            return out;
        }
        let Some(kind) = self.timers.remove(&id) else {
            return out; // stale timer
        };
        match kind {
            TimerKind::Bootstrap => self.round_start(now_us, &mut out),
            TimerKind::RoundTimeout => {
                if self.round_timer != Some(id) {
                    return out;
                }
                self.round_timer = None;
                self.round_expirations += 1;
                self.metric(MetricEvent::TimeoutExpired {
                    height: self.best_height + 1,
                    alt_idx: self.round_expirations,
                });
                self.try_create(self.round_expirations, now_us, &mut out);
            }
            TimerKind::CreateBlock { alt_idx, height } => {
                if self.create_timer != Some(id) {
                    return out;
                }
                self.create_timer = None;
                if height == self.best_height + 1 && alt_idx == self.round_expirations {
                    self.try_create(alt_idx, now_us, &mut out);
                }
            }
            TimerKind::Checkpoint { height } => self.finish_checkpoint(height, now_us, &mut out),
            TimerKind::SyncRetry => {
                if self.sync_timer != Some(id) {
                    return out;
                }
                self.sync_timer = None;
                if !self.orphans.is_empty() || self.sync_in_flight {
                    self.sync_in_flight = false;
                    self.request_sync(&mut out);
                }
            }
        }
        out
    }

    pub fn on_message(&mut self, msg: NetMsg, now_us: u64) -> Outbound {
        let mut out = Outbound::default();
        if !self.online || !self.started {
            return out;
        }
        match msg {
            NetMsg::Block(block) => self.receive_block(block, true, now_us, &mut out),
            NetMsg::Tx(tx) => self.receive_tx(tx, false, &mut out),
            NetMsg::Vote(vote) => self.receive_vote(vote, &mut out),
            NetMsg::SyncRequest {
                from_height,
                requester,
            } => self.serve_sync(from_height, requester, &mut out),
            NetMsg::SyncResponse {
                finalized_height,
                finalized_digest,
                blocks,
            } => self.apply_sync(finalized_height, finalized_digest, blocks, now_us, &mut out),
            NetMsg::KxInit { .. } | NetMsg::KxAck { .. } => {}
        }
        out
    }

    /// Locally injected transaction: validated like any other, but gossiped
    /// as an origination (stem phase in the stem/fluff modes).
    pub fn on_inject_tx(&mut self, tx: Tx) -> Outbound {
        let mut out = Outbound::default();
        if self.online && self.started {
            self.receive_tx(tx, true, &mut out);
        }
        out
    }

    // --- round lifecycle ---

    fn round_start(&mut self, now_us: u64, out: &mut Outbound) {
        self.round_expirations = 0;
        out.rounds_started.push(self.best_height + 1);
        self.try_create(0, now_us, out);
    }

    fn try_create(&mut self, alt_idx: u16, now_us: u64, out: &mut Outbound) {
        let stakes = self.gs.active_stakes();
        let rand = election_rand(&self.best_header().rand, &self.election.max);
        match elect(&rand, alt_idx, &stakes, &self.election) {
            Ok(set) if set.leader == self.id => {
                let due = self.last_block_at_us + self.params.min_block_interval_us;
                if now_us >= due {
                    self.create_block(alt_idx, &set.alternatives, now_us, out);
                } else {
                    let id = self.arm_timer(
                        TimerKind::CreateBlock {
                            alt_idx,
                            height: self.best_height + 1,
                        },
                        due - now_us,
                    );
                    self.create_timer = Some(id);
                }
            }
            Ok(_) => self.arm_round_timeout(),
            // With every eligible leader exhausted (or no stake at all)
            // nothing can be produced; keep waiting for the network.
            Err(_) => self.arm_round_timeout(),
        }
    }

    fn arm_round_timeout(&mut self) {
        let id = self.arm_timer(TimerKind::RoundTimeout, self.params.block_timeout_us);
        self.round_timer = Some(id);
    }

    fn create_block(
        &mut self,
        alt_idx: u16,
        alternatives: &[AccountId],
        now_us: u64,
        out: &mut Outbound,
    ) {
        let height = self.best_height + 1;
        let prev = self.best_header();
        let mut exec = self.gs.clone();
        exec.process_pending(height);

        let mut included: Vec<Tx> = Vec::new();
        let mut fees = 0u64;
        for tx in self.mempool.iter() {
            if included.len() >= self.params.max_block_txs {
                break;
            }
            if let Some(vote_ref) = &tx.vote_ref {
                if !self.on_best_chain(vote_ref) {
                    continue; // stays pooled until the stale sweep evicts it
                }
            }
            if exec.apply_tx(tx, height, &self.rules).is_ok() {
                fees += tx.fee;
                included.push(tx.clone());
            }
        }
        let minted = exec.apply_reward(
            self.id,
            alternatives,
            fees,
            self.params.full_reward,
            self.params.partial_reward,
        );

        let rand = round_randomness(&self.keypair, &prev.rand);
        let mut header = Header {
            id: height,
            h_prev: self.best,
            txs_root: compute_txs_root(&included),
            state_root: exec.state_root(),
            coinbase: self.keypair.public(),
            rand,
            alt_idx,
            sig: crate::crypto::Signature::ZERO,
        };
        header.sign_with(&self.keypair);
        let block = Block {
            header,
            txs: included,
        };
        let digest = block.digest();
        let vote_count = block.txs.iter().filter(|t| t.vote_ref.is_some()).count() as u32;

        self.metric(MetricEvent::BlockCreated {
            height,
            digest,
            producer: self.id,
            alt_idx,
            tx_count: block.txs.len(),
        });
        out.gossip.push((NetMsg::Block(block.clone()), true));
        self.tracker
            .insert(block, vote_count)
            .expect("own block extends the tracked best tip");
        self.adopt_tip(digest, height, exec, minted, now_us, out);
    }

    /// Move the best tip to `digest` (already tracked and executed).
    fn adopt_tip(
        &mut self,
        digest: Digest,
        height: Height,
        exec: GlobalState,
        minted: u64,
        now_us: u64,
        out: &mut Outbound,
    ) {
        self.minted_open.insert(digest, minted);
        self.best = digest;
        self.best_height = height;
        self.gs = exec;
        self.last_block_at_us = now_us;
        self.cancel_round_timers();
        self.sweep_mempool();
        self.maybe_checkpoint(now_us, out);
        self.round_start(now_us, out);
    }

    fn cancel_round_timers(&mut self) {
        if let Some(id) = self.round_timer.take() {
            self.timers.remove(&id);
            self.actions.push(Action::CancelTimer { id });
        }
        if let Some(id) = self.create_timer.take() {
            self.timers.remove(&id);
            self.actions.push(Action::CancelTimer { id });
        }
    }

    fn best_header(&self) -> Header {
        if self.best == self.genesis_digest {
            self.genesis_header.clone()
        } else {
            self.tracker
                .get(&self.best)
                .expect("best tip is tracked")
                .block
                .header
                .clone()
        }
    }

    fn header_of(&self, digest: &Digest) -> Option<Header> {
        if *digest == self.genesis_digest {
            return Some(self.genesis_header.clone());
        }
        if let Some(h) = self.archived.get(digest) {
            return self.archive.get((*h - 1) as usize).map(|b| b.header.clone());
        }
        self.tracker.get(digest).map(|t| t.block.header.clone())
    }

    fn on_best_chain(&self, digest: &Digest) -> bool {
        *digest == self.genesis_digest
            || self.archived.contains_key(digest)
            || self.tracker.is_ancestor(digest, &self.best)
    }

    // --- block reception ---

    fn receive_block(&mut self, block: Block, live: bool, now_us: u64, out: &mut Outbound) {
        let digest = block.digest();
        if self.tracker.contains(&digest) || self.archived.contains_key(&digest) {
            return;
        }
        let parent = block.header.h_prev;

        if parent == self.best {
            // Alg-2 live path: the expired-timeout count must match. Blocks
            // replayed from the orphan buffer or sync skip this check — by
            // then this node is known to lag the network's round view.
            if live && block.header.alt_idx != self.round_expirations {
                self.metric(MetricEvent::BlockRejected { reason: "alt-idx" });
                return;
            }
            let parent_header = self.best_header();
            match self.validate_and_execute(&block, &parent_header, &self.gs.clone()) {
                Ok((exec, minted, vote_count)) => {
                    let height = block.header.id;
                    let producer = self
                        .gs
                        .id_of(&block.header.coinbase)
                        .expect("validated leader exists");
                    self.metric(MetricEvent::BlockAccepted {
                        height,
                        digest,
                        producer,
                        alt_idx: block.header.alt_idx,
                        tx_count: block.txs.len(),
                    });
                    out.gossip.push((NetMsg::Block(block.clone()), false));
                    self.tracker
                        .insert(block, vote_count)
                        .expect("parent is the tracked best tip");
                    self.adopt_tip(digest, height, exec, minted, now_us, out);
                    self.replay_orphans(digest, now_us, out);
                }
                Err(reason) => self.metric(MetricEvent::BlockRejected { reason }),
            }
            return;
        }

        if self.tracker.contains(&parent) {
            self.track_fork_block(block, now_us, out);
            return;
        }

        // Parent unknown: either hopelessly old or not yet delivered.
        if block.header.id <= self.tracker.finalized_height() {
            self.metric(MetricEvent::BlockRejected {
                reason: "pre-finalized",
            });
            return;
        }
        let bucket = self.orphans.entry(parent).or_default();
        if bucket.len() < 32 && !bucket.iter().any(|b| b.digest() == digest) {
            bucket.push(block);
        }
        if !self.sync_in_flight {
            self.request_sync(out);
        }
    }

    fn replay_orphans(&mut self, parent: Digest, now_us: u64, out: &mut Outbound) {
        if let Some(waiting) = self.orphans.remove(&parent) {
            for block in waiting {
                self.receive_block(block, false, now_us, out);
            }
        }
    }

    /// Structural validation for a block extending a non-best branch. Its
    /// execution is deferred until the branch actually wins.
    fn track_fork_block(&mut self, block: Block, now_us: u64, out: &mut Outbound) {
        
        let parent = block.header.h_prev;
        let Some(parent_header) = self.header_of(&parent) else {
            return;
        };
        if block.header.id != parent_header.id + 1 {
            self.metric(MetricEvent::BlockRejected { reason: "height" });
            return;
        }
        if !block.header.verify_sig() {
            self.metric(MetricEvent::BlockRejected { reason: "header-sig" });
            return;
        }
        if !verify_round_randomness(&block.header.coinbase, &parent_header.rand, &block.header.rand)
        {
            self.metric(MetricEvent::BlockRejected { reason: "rand-sig" });
            return;
        }
        // Leadership must hold relative to the stake distribution on that
        // branch.
        let parent_state = match self.state_at(&parent) {
            Ok(gs) => gs,
            Err(reason) => {
                self.metric(MetricEvent::BlockRejected { reason });
                return;
            }
        };
        let rand = election_rand(&parent_header.rand, &self.election.max);
        let stakes = parent_state.active_stakes();
        let leader_ok = elect(&rand, block.header.alt_idx, &stakes, &self.election)
            .ok()
            .and_then(|set| parent_state.account(set.leader).map(|a| a.pk))
            .map(|pk| pk == block.header.coinbase)
            .unwrap_or(false);
        if !leader_ok {
            self.metric(MetricEvent::BlockRejected { reason: "not-leader" });
            return;
        }
        // Context-sensitive votes must point into this block's own chain.
        let mut vote_count = 0u32;
        for tx in &block.txs {
            if let Some(r) = &tx.vote_ref {
                let on_chain = *r == self.genesis_digest
                    || self.archived.contains_key(r)
                    || self.tracker.is_ancestor(r, &parent);
                if !on_chain {
                    self.metric(MetricEvent::BlockRejected { reason: "vote-ref" });
                    return;
                }
                vote_count += 1;
            }
        }
        match self.tracker.insert(block.clone(), vote_count) {
            Ok(()) => {
                self.metric(MetricEvent::ForkBlockTracked {
                    height: block.header.id,
                });
                out.gossip.push((NetMsg::Block(block), false));
                self.maybe_switch_tip(now_us, out);
            }
            Err(ForkError::PreFinalizedFork) => self.metric(MetricEvent::BlockRejected {
                reason: "pre-finalized",
            }),
            Err(_) => {}
        }
    }

    /// Adopt a side branch when its quality strictly exceeds the current
    /// best's, re-executing its blocks from the finalized state.
    fn maybe_switch_tip(&mut self, now_us: u64, out: &mut Outbound) {
        let candidate = self.tracker.best_tip();
        if candidate == self.best || candidate == self.tracker.finalized() {
            return;
        }
        if self.tracker.quality(&candidate) <= self.tracker.quality(&self.best) {
            return;
        }
        match self.execute_branch(&candidate) {
            Ok((exec, minted_per_block, path)) => {
                let from = self.best;
                for (d, minted) in path.iter().zip(&minted_per_block) {
                    self.minted_open.insert(*d, *minted);
                }
                self.best = candidate;
                self.best_height = self.tracker.height_of(&candidate).expect("tracked");
                self.gs = exec;
                self.last_block_at_us = now_us;
                self.metric(MetricEvent::TipSwitch {
                    from,
                    to: candidate,
                });
                self.cancel_round_timers();
                self.sweep_mempool();
                self.round_start(now_us, out);
            }
            Err(_reason) => {
                // The branch does not execute cleanly; stay where we are.
                self.metric(MetricEvent::BlockRejected {
                    reason: "branch-exec",
                });
            }
        }
    }

    /// Re-execute the chain from the finalized state up to `tip`, fully
    /// validating each block.
    fn execute_branch(
        &self,
        tip: &Digest,
    ) -> Result<(GlobalState, Vec<u64>, Vec<Digest>), &'static str> {
        let path = self
            .tracker
            .path_from_finalized(tip)
            .ok_or("branch-path")?;
        let mut gs = self.state_at_finalized.clone();
        let mut parent_header = self
            .header_of(&self.tracker.finalized())
            .ok_or("branch-anchor")?;
        let mut minted_per_block = Vec::with_capacity(path.len());
        for d in &path {
            let block = &self.tracker.get(d).ok_or("branch-block")?.block;
            let (next, minted, _) = self.validate_and_execute(block, &parent_header, &gs)?;
            gs = next;
            minted_per_block.push(minted);
            parent_header = block.header.clone();
        }
        Ok((gs, minted_per_block, path))
    }

    /// State after executing the chain ending at `digest`.
    fn state_at(&self, digest: &Digest) -> Result<GlobalState, &'static str> {
        if *digest == self.tracker.finalized() {
            return Ok(self.state_at_finalized.clone());
        }
        if *digest == self.best {
            return Ok(self.gs.clone());
        }
        self.execute_branch(digest).map(|(gs, _, _)| gs)
    }

    /// The full validation pipeline for a block extending `parent_header`,
    /// executed against `base` (the state at the parent). Returns the
    /// post-state, the minted amount, and the number of embedded votes.
    fn validate_and_execute(
        &self,
        block: &Block,
        parent_header: &Header,
        base: &GlobalState,
    ) -> Result<(GlobalState, u64, u32), &'static str> {
        let header = &block.header;
        if header.id != parent_header.id + 1 {
            return Err("height");
        }
        if !header.verify_sig() {
            return Err("header-sig");
        }
        if !verify_round_randomness(&header.coinbase, &parent_header.rand, &header.rand) {
            return Err("rand-sig");
        }
        if block.txs.len() > self.params.max_block_txs {
            return Err("too-many-txs");
        }
        if compute_txs_root(&block.txs) != header.txs_root {
            return Err("txs-root");
        }
        let stakes = base.active_stakes();
        let rand = election_rand(&parent_header.rand, &self.election.max);
        let set = elect(&rand, header.alt_idx, &stakes, &self.election).map_err(|_| "election")?;
        let leader_pk = base.account(set.leader).map(|a| a.pk).ok_or("election")?;
        if leader_pk != header.coinbase {
            return Err("not-leader");
        }

        let mut exec = base.clone();
        exec.process_pending(header.id);
        let mut fees = 0u64;
        let mut vote_count = 0u32;
        for tx in &block.txs {
            if let Some(r) = &tx.vote_ref {
                let on_chain = *r == self.genesis_digest
                    || self.archived.contains_key(r)
                    || self.tracker.is_ancestor(r, &header.h_prev)
                    || *r == header.h_prev;
                if !on_chain {
                    return Err("vote-ref");
                }
                vote_count += 1;
            }
            exec.apply_tx(tx, header.id, &self.rules)
                .map_err(|_| "tx-invalid")?;
            fees += tx.fee;
        }
        let minted = exec.apply_reward(
            set.leader,
            &set.alternatives,
            fees,
            self.params.full_reward,
            self.params.partial_reward,
        );
        if exec.state_root() != header.state_root {
            return Err("state-root");
        }
        Ok((exec, minted, vote_count))
    }

    // --- transactions ---

    fn receive_tx(&mut self, tx: Tx, originated: bool, out: &mut Outbound) {
        let digest = tx.digest();
        if self.mempool.contains(&digest) {
            return;
        }
        if let Err(e) = self.gs.validate_tx(&tx) {
            self.metric(MetricEvent::TxRejected {
                reason: tx_error_name(e),
            });
            return;
        }
        self.mempool.insert(tx.clone(), self.best_height);
        out.gossip.push((NetMsg::Tx(tx), originated));
    }

    /// Drop transactions a new best state makes unincludable: consumed or
    /// out-of-date nonces, and context-sensitive votes whose reference has
    /// not been on our chain for a full two checkpoint intervals.
    fn sweep_mempool(&mut self) {
        let stale_after = 2 * self.params.checkpoint_interval;
        let gs = &self.gs;
        let genesis = self.genesis_digest;
        let archived = &self.archived;
        let tracker = &self.tracker;
        let best = self.best;
        let best_height = self.best_height;
        self.mempool.retain(|tx, inserted_at| {
            let nonce_ok = gs
                .account_by_pk(&tx.src)
                .map(|a| a.nonce == tx.nonce)
                .unwrap_or(false);
            if !nonce_ok {
                return false;
            }
            if let Some(r) = &tx.vote_ref {
                let on_chain =
                    *r == genesis || archived.contains_key(r) || tracker.is_ancestor(r, &best);
                if !on_chain && best_height.saturating_sub(inserted_at) >= stale_after {
                    return false;
                }
            }
            true
        });
    }

    // --- checkpointing ---

    fn maybe_checkpoint(&mut self, _now_us: u64, out: &mut Outbound) {
        let interval = self.params.checkpoint_interval;
        if interval == 0 {
            return;
        }
        let height = self.best_height;
        if height == 0 || height % interval != 0 || height <= self.checkpoint_done {
            return;
        }
        self.checkpoint_done = height;
        // Vote for the checkpoint block on our best chain, if we sit on the
        // committee that block's randomness elects.
        let Some(cp_digest) = self.tracker.ancestor_at_height(&self.best, height) else {
            return;
        };
        if let Some(committee) = self.committee_for(&cp_digest) {
            if committee.contains(&self.id) {
                let mut vote = CheckpointVote {
                    height,
                    tip: cp_digest,
                    voter: self.id,
                    sig: crate::crypto::Signature::ZERO,
                };
                vote.sign_with(&self.keypair);
                self.votes
                    .entry(height)
                    .or_default()
                    .insert(self.id, vote.clone());
                out.gossip.push((NetMsg::Vote(vote), true));
            }
        }
        self.arm_timer(
            TimerKind::Checkpoint { height },
            2 * self.params.block_timeout_us,
        );
    }

    /// The committee for a checkpoint block: seeded by that block's own
    /// randomness (domain-separated), weighted by the stake distribution the
    /// block's chain produced.
    fn committee_for(&self, cp_digest: &Digest) -> Option<Vec<AccountId>> {
        let header = self.header_of(cp_digest)?;
        let state = self.state_at(cp_digest).ok()?;
        let seed = reduce_rand(checkpoint_seed(&header.rand).as_bytes(), &self.election.max);
        elect_committee(
            &seed,
            self.params.committee_size,
            &state.active_stakes(),
            &self.election,
        )
        .ok()
    }

    fn receive_vote(&mut self, vote: CheckpointVote, out: &mut Outbound) {
        let interval = self.params.checkpoint_interval;
        if interval == 0 || vote.height % interval != 0 || vote.height == 0 {
            return;
        }
        if vote.height <= self.tracker.finalized_height() {
            return; // already settled
        }
        let Some(pk) = self.node_pks.get(&vote.voter) else {
            return;
        };
        if !vote.verify_sig(pk) {
            self.metric(MetricEvent::TxRejected {
                reason: "vote-signature",
            });
            return;
        }
        let slot = self.votes.entry(vote.height).or_default();
        if slot.contains_key(&vote.voter) {
            return;
        }
        slot.insert(vote.voter, vote.clone());
        out.gossip.push((NetMsg::Vote(vote), false));
    }

    /// Vote window closed: tally what arrived and finalize on a 2/3 match.
    fn finish_checkpoint(&mut self, height: Height, now_us: u64, out: &mut Outbound) {
        if height <= self.tracker.finalized_height() {
            self.votes.remove(&height);
            return;
        }
        let Some(collected) = self.votes.remove(&height) else {
            self.metric(MetricEvent::CheckpointNoDecision { height });
            return;
        };
        // Only count voters that sit on the committee of the branch they
        // voted for.
        let valid: Vec<CheckpointVote> = collected
            .into_values()
            .filter(|v| {
                self.tracker.height_of(&v.tip) == Some(v.height)
                    && self
                        .committee_for(&v.tip)
                        .map(|c| c.contains(&v.voter))
                        .unwrap_or(false)
            })
            .collect();
        match tally_votes(valid.iter(), self.params.committee_size) {
            Some(tip) => self.finalize_tip(tip, height, now_us, out),
            None => self.metric(MetricEvent::CheckpointNoDecision { height }),
        }
    }

    fn finalize_tip(&mut self, tip: Digest, height: Height, now_us: u64, out: &mut Outbound) {
        let Ok(new_finalized_state) = self.state_at(&tip) else {
            self.metric(MetricEvent::CheckpointNoDecision { height });
            return;
        };
        let on_best = self.tracker.is_ancestor(&tip, &self.best);
        let Ok(settled) = self.tracker.finalize(tip) else {
            return;
        };
        for block in settled {
            let d = block.digest();
            self.minted_finalized += self.minted_open.remove(&d).unwrap_or(0);
            self.archived.insert(d, block.header.id);
            self.archive.push(block);
        }
        self.minted_open.retain(|d, _| self.tracker.contains(d));
        self.state_at_finalized = new_finalized_state;
        self.metric(MetricEvent::CheckpointFinalized {
            height,
            digest: tip,
        });
        // If our working tip sat on a pruned branch, fall back to the best
        // surviving one.
        if !on_best || !self.tracker.contains(&self.best) {
            let candidate = self.tracker.best_tip();
            match self.execute_branch(&candidate) {
                Ok((exec, minted, path)) => {
                    for (d, m) in path.iter().zip(&minted) {
                        self.minted_open.insert(*d, *m);
                    }
                    let from = self.best;
                    self.best = candidate;
                    self.best_height = self.tracker.height_of(&candidate).expect("tracked");
                    self.gs = exec;
                    self.last_block_at_us = now_us;
                    if from != candidate {
                        self.metric(MetricEvent::TipSwitch {
                            from,
                            to: candidate,
                        });
                    }
                    self.cancel_round_timers();
                    self.sweep_mempool();
                    self.round_start(now_us, out);
                }
                Err(_) => {
                    // Finalized tip with no executable extension: rebase onto
                    // the finalized block itself.
                    self.best = self.tracker.finalized();
                    self.best_height = self.tracker.finalized_height();
                    self.gs = self.state_at_finalized.clone();
                    self.cancel_round_timers();
                    self.round_start(now_us, out);
                }
            }
        }
    }

    // --- catch-up sync ---

    fn request_sync(&mut self, out: &mut Outbound) {
        let peers: Vec<AccountId> = self
            .node_pks
            .keys()
            .copied()
            .filter(|id| *id != self.id)
            .collect();
        if peers.is_empty() {
            return;
        }
        let peer = peers[self.rng.gen_range(0..peers.len())];
        self.sync_in_flight = true;
        self.metric(MetricEvent::SyncRequested {
            from_height: self.best_height,
        });
        out.direct.push((
            peer,
            NetMsg::SyncRequest {
                from_height: self.best_height,
                requester: self.id,
            },
        ));
        let id = self.arm_timer(TimerKind::SyncRetry, 2 * self.params.block_timeout_us);
        self.sync_timer = Some(id);
    }

    fn serve_sync(&mut self, from_height: Height, requester: AccountId, out: &mut Outbound) {
        if requester == self.id {
            return;
        }
        let mut blocks = Vec::new();
        let mut h = from_height + 1;
        // Finalized archive first, then the open best path.
        while blocks.len() < SYNC_BATCH_LIMIT && h <= self.tracker.finalized_height() {
            if let Some(b) = self.archive.get((h - 1) as usize) {
                blocks.push(b.clone());
            }
            h += 1;
        }
        if let Some(path) = self.tracker.path_from_finalized(&self.best) {
            for d in path {
                if blocks.len() >= SYNC_BATCH_LIMIT {
                    break;
                }
                let tb = self.tracker.get(&d).expect("path tracked");
                if tb.height >= h {
                    blocks.push(tb.block.clone());
                }
            }
        }
        out.direct.push((
            requester,
            NetMsg::SyncResponse {
                finalized_height: self.tracker.finalized_height(),
                finalized_digest: self.tracker.finalized(),
                blocks,
            },
        ));
    }

    fn apply_sync(
        &mut self,
        finalized_height: Height,
        finalized_digest: Digest,
        blocks: Vec<Block>,
        now_us: u64,
        out: &mut Outbound,
    ) {
        self.sync_in_flight = false;
        if let Some(id) = self.sync_timer.take() {
            self.timers.remove(&id);
            self.actions.push(Action::CancelTimer { id });
        }
        let had_blocks = !blocks.is_empty();
        let batch_full = blocks.len() >= SYNC_BATCH_LIMIT;
        for block in blocks {
            self.receive_block(block, false, now_us, out);
        }
        // Adopt the responder's finalized claim once we actually track that
        // block on our chain (peers are honest in this deployment model).
        if finalized_height > self.tracker.finalized_height()
            && self.tracker.height_of(&finalized_digest) == Some(finalized_height)
            && self.tracker.is_ancestor(&finalized_digest, &self.best)
        {
            self.finalize_tip(finalized_digest, finalized_height, now_us, out);
        }
        if batch_full {
            self.request_sync(out);
        } else if !had_blocks && self.started && self.round_timer.is_none() && self.create_timer.is_none()
        {
            // Nothing was missed; rejoin the live round.
            self.round_start(now_us, out);
        }
    }

    // --- plumbing ---

    fn arm_timer(&mut self, kind: TimerKind, delay_us: u64) -> u64 {
        let id = self.next_timer;
        self.next_timer += 1;
        self.timers.insert(id, kind);
        self.actions.push(Action::StartTimer { id, delay_us });
        id
    }

    fn metric(&mut self, event: MetricEvent) {
        self.actions.push(Action::Metric(event));
    }
}

fn tx_error_name(e: crate::ledger::TxError) -> &'static str {
    use crate::ledger::TxError::*;
    match e {
        UnknownSender => "unknown-sender",
        BadSignature => "bad-signature",
        InsufficientBalance => "insufficient-balance",
        InsufficientStake => "insufficient-stake",
        BadNonce => "bad-nonce",
        StaleVoteRef => "stale-vote-ref",
    }
}
