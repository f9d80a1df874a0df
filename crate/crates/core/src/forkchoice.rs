//! Fork tracking and resolution: per-block quality weights that decay with
//! the alternative-leader index, segment quality with context-sensitive vote
//! contributions, and the periodic committee checkpoint that finalizes the
//! strongest tip with a 2/3 vote.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::crypto::{Digest, Keypair, PublicKey, Signature, SIGNATURE_LEN};
use crate::ledger::{AccountId, Block, Height};

/// Weight a block contributes to its chain segment: 1 for a main-leader
/// block, halved for each step down the alternative-leader list.
pub fn block_weight(alt_idx: u16) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::one() << alt_idx as usize)
}

/// Quality contributed by one context-sensitive vote embedded in a block.
/// Small enough that votes act as tie-breakers and never outweigh a block.
pub fn vote_weight() -> BigRational {
    BigRational::new(BigInt::one(), BigInt::from(100))
}

/// Votes needed to finalize a tip: ⌈2n/3⌉ of an n-member committee.
pub fn finalize_threshold(committee_size: usize) -> usize {
    (2 * committee_size).div_ceil(3)
}

/// A committee member's signed statement that `tip` is the strongest chain at
/// checkpoint `height`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointVote {
    pub height: Height,
    pub tip: Digest,
    pub voter: AccountId,
    pub sig: Signature,
}

impl CheckpointVote {
    /// Preimage covered by the vote signature: the canonical encoding minus
    /// the signature (including the leading kind tag).
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(49);
        out.push(crate::wire::VOTE_TAG);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(self.tip.as_bytes());
        out.extend_from_slice(&self.voter.to_be_bytes());
        out
    }

    pub fn sign_with(&mut self, kp: &Keypair) {
        self.sig = kp.sign(&self.signing_bytes());
    }

    pub fn verify_sig(&self, voter_pk: &PublicKey) -> bool {
        crate::crypto::verify(voter_pk, &self.signing_bytes(), &self.sig)
    }

    /// Body of the canonical encoding (everything after the kind tag).
    pub fn encode_body(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(self.tip.as_bytes());
        out.extend_from_slice(&self.voter.to_be_bytes());
        out.extend_from_slice(self.sig.as_bytes());
    }

    pub fn decode_body(bytes: &[u8]) -> Result<CheckpointVote, crate::ledger::CodecError> {
        if bytes.len() != 8 + 32 + 8 + SIGNATURE_LEN {
            return Err(crate::ledger::CodecError::UnexpectedEnd("vote"));
        }
        Ok(CheckpointVote {
            height: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            tip: Digest::from_slice(&bytes[8..40]).unwrap(),
            voter: u64::from_be_bytes(bytes[40..48].try_into().unwrap()),
            sig: Signature(bytes[48..].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ForkError {
    #[error("block forks off before the finalized checkpoint")]
    PreFinalizedFork,
    #[error("parent block is not tracked")]
    UnknownParent,
    #[error("block already tracked")]
    Duplicate,
    #[error("digest not tracked")]
    UnknownBlock,
}

/// A tracked block plus the data quality computation needs.
#[derive(Clone, Debug)]
pub struct TrackedBlock {
    pub block: Block,
    pub parent: Digest,
    pub height: Height,
    pub alt_idx: u16,
    /// Context-sensitive votes carried by this block whose reference lies on
    /// its own chain (the only kind block validation admits).
    pub votes: u32,
}

/// The open region of the chain: every block descending from the last
/// finalized checkpoint, with per-tip quality bookkeeping.
#[derive(Clone, Debug)]
pub struct ForkTracker {
    blocks: BTreeMap<Digest, TrackedBlock>,
    children: BTreeMap<Digest, Vec<Digest>>,
    tips: BTreeSet<Digest>,
    finalized: Digest,
    finalized_height: Height,
    quality_cache: BTreeMap<Digest, BigRational>,
}

impl ForkTracker {
    /// Start tracking above an anchor block (genesis or the last finalized
    /// checkpoint). The anchor itself contributes no quality.
    pub fn new(anchor: Digest, anchor_height: Height) -> ForkTracker {
        let mut tips = BTreeSet::new();
        tips.insert(anchor);
        ForkTracker {
            blocks: BTreeMap::new(),
            children: BTreeMap::new(),
            tips,
            finalized: anchor,
            finalized_height: anchor_height,
            quality_cache: BTreeMap::new(),
        }
    }

    pub fn finalized(&self) -> Digest {
        self.finalized
    }

    pub fn finalized_height(&self) -> Height {
        self.finalized_height
    }

    pub fn tips(&self) -> impl Iterator<Item = &Digest> {
        self.tips.iter()
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        *digest == self.finalized || self.blocks.contains_key(digest)
    }

    pub fn get(&self, digest: &Digest) -> Option<&TrackedBlock> {
        self.blocks.get(digest)
    }

    pub fn height_of(&self, digest: &Digest) -> Option<Height> {
        if *digest == self.finalized {
            Some(self.finalized_height)
        } else {
            self.blocks.get(digest).map(|b| b.height)
        }
    }

    /// Track a block whose parent is already known. Blocks that do not reach
    /// the finalized checkpoint are refused: honest nodes never overturn
    /// finalized history.
    pub fn insert(&mut self, block: Block, votes: u32) -> Result<(), ForkError> {
        let digest = block.digest();
        if self.contains(&digest) {
            return Err(ForkError::Duplicate);
        }
        let parent = block.header.h_prev;
        if !self.contains(&parent) {
            // Parents below the finalized height can never become available
            // again; anything else is merely not-yet-delivered.
            if block.header.id <= self.finalized_height {
                return Err(ForkError::PreFinalizedFork);
            }
            return Err(ForkError::UnknownParent);
        }
        let parent_height = self.height_of(&parent).expect("contains checked");
        let info = TrackedBlock {
            parent,
            height: parent_height + 1,
            alt_idx: block.header.alt_idx,
            votes,
            block,
        };
        self.children.entry(parent).or_default().push(digest);
        self.tips.remove(&parent);
        self.tips.insert(digest);
        self.quality_cache.remove(&parent);
        let parent_quality = if parent == self.finalized {
            BigRational::zero()
        } else {
            self.quality(&parent)
        };
        let q = parent_quality
            + block_weight(info.alt_idx)
            + vote_weight() * BigInt::from(info.votes);
        self.blocks.insert(digest, info);
        self.quality_cache.insert(digest, q);
        Ok(())
    }

    /// Cumulative quality of the segment from the finalized checkpoint
    /// (exclusive) up to `tip`: Σ 2^(−alt_idx) over blocks plus the vote
    /// contribution.
    pub fn quality(&self, tip: &Digest) -> BigRational {
        if let Some(q) = self.quality_cache.get(tip) {
            return q.clone();
        }
        let mut q = BigRational::zero();
        let mut at = *tip;
        while at != self.finalized {
            let Some(info) = self.blocks.get(&at) else {
                return BigRational::zero();
            };
            q += block_weight(info.alt_idx) + vote_weight() * BigInt::from(info.votes);
            at = info.parent;
        }
        q
    }

    /// Digests from the finalized checkpoint (exclusive) to `tip`, ascending.
    pub fn path_from_finalized(&self, tip: &Digest) -> Option<Vec<Digest>> {
        let mut path = Vec::new();
        let mut at = *tip;
        while at != self.finalized {
            path.push(at);
            at = self.blocks.get(&at)?.parent;
        }
        path.reverse();
        Some(path)
    }

    /// Is `ancestor` on the path from the finalized checkpoint to `tip`
    /// (inclusive of both)?
    pub fn is_ancestor(&self, ancestor: &Digest, tip: &Digest) -> bool {
        let mut at = *tip;
        loop {
            if at == *ancestor {
                return true;
            }
            if at == self.finalized {
                return false;
            }
            match self.blocks.get(&at) {
                Some(info) => at = info.parent,
                None => return false,
            }
        }
    }

    /// The block at exactly `height` on the chain ending in `tip`.
    pub fn ancestor_at_height(&self, tip: &Digest, height: Height) -> Option<Digest> {
        let mut at = *tip;
        loop {
            let h = self.height_of(&at)?;
            if h == height {
                return Some(at);
            }
            if h < height || at == self.finalized {
                return None;
            }
            at = self.blocks.get(&at)?.parent;
        }
    }

    /// Highest-quality tip; ties break toward the lexicographically smaller
    /// digest so every honest node lands on the same choice.
    pub fn best_tip(&self) -> Digest {
        let mut best = self.finalized;
        let mut best_q = BigRational::zero();
        let mut have_block = false;
        for tip in &self.tips {
            if *tip == self.finalized {
                continue;
            }
            let q = self.quality(tip);
            if !have_block || q > best_q || (q == best_q && *tip < best) {
                best = *tip;
                best_q = q;
                have_block = true;
            }
        }
        best
    }

    /// Finalize a tracked block: everything not descending from it is
    /// pruned, and it becomes the new anchor.
    pub fn finalize(&mut self, digest: Digest) -> Result<Vec<Block>, ForkError> {
        if digest != self.finalized && !self.blocks.contains_key(&digest) {
            return Err(ForkError::UnknownBlock);
        }
        // The newly finalized linear history, returned for archiving.
        let settled: Vec<Block> = self
            .path_from_finalized(&digest)
            .ok_or(ForkError::UnknownBlock)?
            .iter()
            .map(|d| self.blocks[d].block.clone())
            .collect();

        let mut keep: BTreeSet<Digest> = BTreeSet::new();
        let mut stack = vec![digest];
        while let Some(d) = stack.pop() {
            if let Some(kids) = self.children.get(&d) {
                for k in kids {
                    keep.insert(*k);
                    stack.push(*k);
                }
            }
        }
        self.finalized_height = self.height_of(&digest).expect("checked above");
        self.finalized = digest;
        self.blocks.retain(|d, _| keep.contains(d));
        self.children.retain(|d, _| *d == digest || keep.contains(d));
        self.quality_cache.clear();
        self.tips = self
            .blocks
            .keys()
            .filter(|d| !self.children.contains_key(*d))
            .copied()
            .collect();
        if self.tips.is_empty() {
            self.tips.insert(digest);
        }
        Ok(settled)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Count votes for one checkpoint height and report the finalized tip, if
/// any reached the threshold. Each voter counts once (first vote wins).
pub fn tally_votes<'a>(
    votes: impl IntoIterator<Item = &'a CheckpointVote>,
    committee_size: usize,
) -> Option<Digest> {
    let mut seen_voters = BTreeSet::new();
    let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
    for v in votes {
        if seen_voters.insert(v.voter) {
            *counts.entry(v.tip).or_default() += 1;
        }
    }
    let threshold = finalize_threshold(committee_size);
    // Two distinct tips can never both reach 2/3 of distinct voters.
    counts
        .into_iter()
        .filter(|(_, n)| *n >= threshold)
        .max_by_key(|(_, n)| *n)
        .map(|(tip, _)| tip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;
    use crate::ledger::{Header, Tx};

    fn ratio(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    fn child_block(parent: &Digest, height: Height, alt_idx: u16, salt: u8) -> Block {
        Block {
            header: Header {
                id: height,
                h_prev: *parent,
                txs_root: hash(&[salt]),
                state_root: hash(b"s"),
                coinbase: crate::crypto::PublicKey([salt; 32]),
                rand: Signature([salt; 64]),
                alt_idx,
                sig: Signature::ZERO,
            },
            txs: Vec::<Tx>::new(),
        }
    }

    #[test]
    fn weights_decay_by_powers_of_two() {
        assert_eq!(block_weight(0), ratio(1, 1));
        assert_eq!(block_weight(1), ratio(1, 2));
        assert_eq!(block_weight(3), ratio(1, 8));
    }

    #[test]
    fn threshold_is_two_thirds_rounded_up() {
        assert_eq!(finalize_threshold(10), 7);
        assert_eq!(finalize_threshold(5), 4);
        assert_eq!(finalize_threshold(3), 2);
        assert_eq!(finalize_threshold(1), 1);
    }

    fn extend(
        t: &mut ForkTracker,
        parent: &Digest,
        height: Height,
        alts: &[u16],
        salt: u8,
    ) -> Vec<Digest> {
        let mut at = *parent;
        let mut h = height;
        let mut out = Vec::new();
        for (i, alt) in alts.iter().enumerate() {
            let b = child_block(&at, h, *alt, salt + i as u8);
            at = b.digest();
            out.push(at);
            t.insert(b, 0).unwrap();
            h += 1;
        }
        out
    }

    #[test]
    fn segment_quality_sums_weights() {
        let anchor = hash(b"anchor");
        let mut t = ForkTracker::new(anchor, 2);
        let a = extend(&mut t, &anchor, 3, &[1, 0, 0], 10);
        let b = extend(&mut t, &anchor, 3, &[0, 0, 0], 50);
        assert_eq!(t.quality(a.last().unwrap()), ratio(5, 2));
        assert_eq!(t.quality(b.last().unwrap()), ratio(3, 1));
        assert_eq!(t.quality(&anchor), BigRational::zero());
    }

    #[test]
    fn votes_contribute_epsilon_each() {
        let anchor = hash(b"anchor");
        let mut t = ForkTracker::new(anchor, 0);
        let b = child_block(&anchor, 1, 0, 1);
        let d = b.digest();
        t.insert(b, 3).unwrap();
        assert_eq!(t.quality(&d), ratio(1, 1) + ratio(3, 100));
    }

    #[test]
    fn quality_matches_recount_oracle_on_random_trees() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let anchor = hash(b"root");
            let mut t = ForkTracker::new(anchor, 0);
            let mut nodes: Vec<(Digest, Height)> = vec![(anchor, 0)];
            // Shadow bookkeeping for the oracle.
            let mut meta: BTreeMap<Digest, (Digest, u16, u32)> = BTreeMap::new();
            for i in 0..50u16 {
                let (parent, ph) = nodes[r.gen_range(0..nodes.len())];
                let alt = r.gen_range(0..4u16);
                let votes = r.gen_range(0..3u32);
                let b = child_block(&parent, ph + 1, alt, (i % 250) as u8);
                let d = b.digest();
                if t.insert(b, votes).is_ok() {
                    nodes.push((d, ph + 1));
                    meta.insert(d, (parent, alt, votes));
                }
            }
            for (tip, _) in &nodes {
                // Brute-force recount along the path.
                let mut expect = BigRational::zero();
                let mut at = *tip;
                while at != anchor {
                    let (p, alt, votes) = meta[&at];
                    expect += block_weight(alt) + vote_weight() * BigInt::from(votes);
                    at = p;
                }
                assert_eq!(t.quality(tip), expect);
            }
        }
    }

    #[test]
    fn pre_finalized_forks_are_rejected() {
        let anchor = hash(b"anchor");
        let mut t = ForkTracker::new(anchor, 5);
        let stale = child_block(&hash(b"older"), 4, 0, 1);
        assert_eq!(t.insert(stale, 0), Err(ForkError::PreFinalizedFork));

        let orphan = child_block(&hash(b"missing"), 9, 0, 2);
        assert_eq!(t.insert(orphan, 0), Err(ForkError::UnknownParent));
    }

    #[test]
    fn best_tip_prefers_strictly_higher_quality() {
        let anchor = hash(b"anchor");
        let mut t = ForkTracker::new(anchor, 0);
        let weak = extend(&mut t, &anchor, 1, &[1], 1); // 0.5
        assert_eq!(t.best_tip(), weak[0]);
        let strong = extend(&mut t, &anchor, 1, &[0], 9); // 1.0
        assert_eq!(t.best_tip(), strong[0]);
    }

    #[test]
    fn equal_quality_breaks_ties_by_digest() {
        let anchor = hash(b"anchor");
        let mut t = ForkTracker::new(anchor, 0);
        let a = extend(&mut t, &anchor, 1, &[0], 1)[0];
        let b = extend(&mut t, &anchor, 1, &[0], 2)[0];
        assert_eq!(t.best_tip(), a.min(b));
    }

    #[test]
    fn finalize_prunes_losers_and_advances_anchor() {
        let anchor = hash(b"anchor");
        let mut t = ForkTracker::new(anchor, 0);
        let a = extend(&mut t, &anchor, 1, &[0, 0], 1);
        let b = extend(&mut t, &anchor, 1, &[1, 0], 40);
        assert_eq!(t.block_count(), 4);

        let settled = t.finalize(a[1]).unwrap();
        assert_eq!(settled.len(), 2);
        assert_eq!(t.finalized(), a[1]);
        assert_eq!(t.finalized_height(), 2);
        assert_eq!(t.block_count(), 0);
        assert!(!t.contains(&b[1]));
        // Losing branch cannot re-enter at or below the finalized height;
        // deeper extensions of pruned parents just stay unknown.
        let again = child_block(&b[0], 2, 0, 80);
        assert_eq!(t.insert(again, 0), Err(ForkError::PreFinalizedFork));
        let deeper = child_block(&b[1], 3, 0, 81);
        assert_eq!(t.insert(deeper, 0), Err(ForkError::UnknownParent));
    }

    #[test]
    fn tally_requires_two_thirds() {
        let tip_a = hash(b"a");
        let tip_b = hash(b"b");
        let mk = |voter: u64, tip: Digest| CheckpointVote {
            height: 10,
            tip,
            voter,
            sig: Signature::ZERO,
        };
        // 7 of 10 for B finalizes it.
        let votes: Vec<CheckpointVote> = (0..2)
            .map(|v| mk(v, tip_a))
            .chain((2..9).map(|v| mk(v, tip_b)))
            .chain(std::iter::once(mk(9, hash(b"c"))))
            .collect();
        assert_eq!(tally_votes(votes.iter(), 10), Some(tip_b));

        // 6 of 10 is short of ⌈20/3⌉ = 7.
        let short: Vec<CheckpointVote> = (0..6).map(|v| mk(v, tip_b)).collect();
        assert_eq!(tally_votes(short.iter(), 10), None);

        // Duplicate voters count once.
        let dup: Vec<CheckpointVote> = (0..7).map(|_| mk(1, tip_b)).collect();
        assert_eq!(tally_votes(dup.iter(), 10), None);
    }

    #[test]
    fn tally_property_random_multisets() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let tips: Vec<Digest> = (0..3u8).map(|i| hash(&[i])).collect();
        for _ in 0..500 {
            let n = r.gen_range(1..=12usize);
            let votes: Vec<CheckpointVote> = (0..n as u64)
                .map(|voter| CheckpointVote {
                    height: 5,
                    tip: tips[r.gen_range(0..tips.len())],
                    voter,
                    sig: Signature::ZERO,
                })
                .collect();
            let result = tally_votes(votes.iter(), n);
            let threshold = finalize_threshold(n);
            for tip in &tips {
                let count = votes.iter().filter(|v| v.tip == *tip).count();
                if count >= threshold {
                    assert_eq!(result, Some(*tip));
                }
            }
            if let Some(winner) = result {
                let count = votes.iter().filter(|v| v.tip == winner).count();
                assert!(count >= threshold);
            }
        }
    }

    #[test]
    fn vote_encoding_roundtrip_and_signature() {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let kp = Keypair::generate(&mut r);
        let mut vote = CheckpointVote {
            height: 30,
            tip: hash(b"tip"),
            voter: 4,
            sig: Signature::ZERO,
        };
        vote.sign_with(&kp);
        assert!(vote.verify_sig(&kp.public()));

        let mut body = Vec::new();
        vote.encode_body(&mut body);
        assert_eq!(CheckpointVote::decode_body(&body).unwrap(), vote);

        let mut tampered = vote.clone();
        tampered.height = 31;
        assert!(!tampered.verify_sig(&kp.public()));
    }
}
