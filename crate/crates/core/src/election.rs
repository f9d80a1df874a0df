//! Stake-weighted leader election and the per-round randomness chain.
//!
//! Accounts with active stake partition an integer interval `[0, MAX)` into
//! cumulative sub-intervals proportional to their stake, in ascending
//! account-id order. A round's randomness selects the first account whose
//! interval end is not below it; re-hashing walks the randomness forward to
//! pick the alternative leaders, skipping accounts already chosen. Everything
//! is integer arithmetic so every implementation lands on the same leaders.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_traits::One;
use thiserror::Error;

use crate::crypto::{hash, hash_parts, Digest, Keypair, PublicKey, Signature};
use crate::ledger::AccountId;

/// Size of the election interval and the number of alternative leaders.
#[derive(Clone, Debug)]
pub struct ElectionParams {
    /// Interval size; the production value is 2^256 (a 32-byte number space).
    pub max: BigUint,
    /// Desired number of alternative leaders per round.
    pub alt_count: u16,
}

impl ElectionParams {
    /// Production-scale interval (2^256). Smaller intervals are meant for
    /// tests only.
    pub fn production(alt_count: u16) -> ElectionParams {
        ElectionParams {
            max: BigUint::one() << 256,
            alt_count,
        }
    }

    pub fn with_max(max: u64, alt_count: u16) -> ElectionParams {
        ElectionParams {
            max: BigUint::from(max),
            alt_count,
        }
    }
}

/// The round's producer plus the ordered fallback leaders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaderSet {
    pub leader: AccountId,
    pub alternatives: Vec<AccountId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ElectError {
    #[error("no account holds active stake")]
    NoEligibleStake,
    #[error("alternative index {alt_idx} exceeds the {available} selectable leaders")]
    AltIndexOutOfRange { alt_idx: u16, available: usize },
}

/// Reduce arbitrary randomness bytes (e.g. a header's rand signature, which
/// is longer than 32 bytes) into the election interval.
pub fn reduce_rand(bytes: &[u8], max: &BigUint) -> BigUint {
    BigUint::from_bytes_be(hash(bytes).as_bytes()) % max
}

/// Advance the randomness walk: hash the 32-byte big-endian encoding of the
/// current value and reduce it back into the interval.
fn next_rand(current: &BigUint, max: &BigUint) -> BigUint {
    let bytes = current.to_bytes_be();
    let mut padded = [0u8; 32];
    let start = 32usize.saturating_sub(bytes.len());
    padded[start..].copy_from_slice(&bytes[bytes.len().saturating_sub(32)..]);
    BigUint::from_bytes_be(hash(&padded).as_bytes()) % max
}

/// Hard bound on the randomness walk. At the production interval size the
/// walk behaves like a PRF and finds every staked account within a handful of
/// steps; with tiny test intervals the hash orbit can enter a cycle that
/// misses small intervals entirely, so the walk must not be unbounded. All
/// nodes share the constant, so a capped selection is still deterministic.
const WALK_LIMIT: usize = 4096;

/// Run the selection walk until `count` distinct accounts are chosen (or all
/// eligible accounts are exhausted, or the walk limit trips — whichever comes
/// first).
fn select_distinct(
    rand: &BigUint,
    count: usize,
    stakes: &BTreeMap<AccountId, u64>,
    max: &BigUint,
) -> Result<Vec<AccountId>, ElectError> {
    // Zero-stake accounts never get an interval, so rand can never land on
    // them (this also avoids a zero-width first interval at rand = 0).
    let eligible: Vec<(AccountId, u64)> = stakes
        .iter()
        .filter(|(_, s)| **s > 0)
        .map(|(id, s)| (*id, *s))
        .collect();
    if eligible.is_empty() {
        return Err(ElectError::NoEligibleStake);
    }
    let stake_sum: BigUint = eligible.iter().map(|(_, s)| BigUint::from(*s)).sum();

    // Cumulative interval ends in ascending account-id order. The last end is
    // forced to MAX-1 so integer division remainders cannot leave a gap.
    let mut ends: Vec<(AccountId, BigUint)> = Vec::with_capacity(eligible.len());
    let mut slider = BigUint::ZERO;
    for (id, stake) in &eligible {
        slider += BigUint::from(*stake) * max / &stake_sum;
        ends.push((*id, slider.clone()));
    }
    ends.last_mut().expect("eligible is non-empty").1 = max - BigUint::one();

    let target = count.min(eligible.len());
    let mut leaders: Vec<AccountId> = Vec::with_capacity(target);
    let mut current = rand % max;
    for _ in 0..WALK_LIMIT {
        if leaders.len() >= target {
            break;
        }
        let picked = ends
            .iter()
            .find(|(_, end)| current <= *end)
            .map(|(id, _)| *id)
            .expect("current < max and the last end is max-1");
        if !leaders.contains(&picked) {
            leaders.push(picked);
        }
        current = next_rand(&current, max);
    }
    Ok(leaders)
}

/// Elect the round leader and alternatives for a given alternative index.
/// `alt_idx` = 0 asks for the main leader; k > 0 drops the first k entries of
/// the selection sequence, so the k-th fallback becomes the leader.
pub fn elect(
    rand: &BigUint,
    alt_idx: u16,
    stakes: &BTreeMap<AccountId, u64>,
    params: &ElectionParams,
) -> Result<LeaderSet, ElectError> {
    let leaders = select_distinct(rand, params.alt_count as usize + 1, stakes, &params.max)?;
    if (alt_idx as usize) >= leaders.len() {
        return Err(ElectError::AltIndexOutOfRange {
            alt_idx,
            available: leaders.len(),
        });
    }
    Ok(LeaderSet {
        leader: leaders[alt_idx as usize],
        alternatives: leaders[alt_idx as usize + 1..].to_vec(),
    })
}

/// Elect a committee of `size` distinct members with the same walk the leader
/// election uses, in selection order.
pub fn elect_committee(
    rand: &BigUint,
    size: usize,
    stakes: &BTreeMap<AccountId, u64>,
    params: &ElectionParams,
) -> Result<Vec<AccountId>, ElectError> {
    select_distinct(rand, size, stakes, &params.max)
}

/// Next round randomness: the leader's deterministic signature over the
/// previous round's randomness bytes.
pub fn round_randomness(kp: &Keypair, prev_rand: &Signature) -> Signature {
    kp.sign(prev_rand.as_bytes())
}

pub fn verify_round_randomness(
    coinbase: &PublicKey,
    prev_rand: &Signature,
    rand: &Signature,
) -> bool {
    crate::crypto::verify(coinbase, prev_rand.as_bytes(), rand)
}

/// Election randomness derived from a header's rand field.
pub fn election_rand(rand: &Signature, max: &BigUint) -> BigUint {
    reduce_rand(rand.as_bytes(), max)
}

/// Seed for the checkpoint committee at a given height, domain-separated from
/// the leader election of the same round.
pub fn checkpoint_seed(rand: &Signature) -> Digest {
    hash_parts(&[rand.as_bytes(), b"checkpoint"])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stakes(pairs: &[(u64, u64)]) -> BTreeMap<AccountId, u64> {
        pairs.iter().copied().collect()
    }

    // Literal re-implementation of the interval walk, kept independent of the
    // production code for cross-checking.
    fn oracle_select(
        rand: u64,
        count: usize,
        stake_list: &[(u64, u64)],
        max: u64,
    ) -> Vec<AccountId> {
        let eligible: Vec<(u64, u64)> =
            stake_list.iter().copied().filter(|(_, s)| *s > 0).collect();
        let sum: u128 = eligible.iter().map(|(_, s)| *s as u128).sum();
        let mut ends: Vec<(u64, u128)> = Vec::new();
        let mut slider: u128 = 0;
        for (id, s) in &eligible {
            slider += (*s as u128) * (max as u128) / sum;
            ends.push((*id, slider));
        }
        ends.last_mut().unwrap().1 = max as u128 - 1;
        let mut current = BigUint::from(rand % max);
        let maxb = BigUint::from(max);
        let mut out = Vec::new();
        for _ in 0..super::WALK_LIMIT {
            if out.len() >= count.min(eligible.len()) {
                break;
            }
            let cur_u = u128::from_str_radix(&current.to_str_radix(16), 16).unwrap();
            let picked = ends.iter().find(|(_, e)| cur_u <= *e).unwrap().0;
            if !out.contains(&picked) {
                out.push(picked);
            }
            current = super::next_rand(&current, &maxb);
        }
        out
    }

    #[test]
    fn hand_executed_interval_case() {
        let st = stakes(&[(0, 10), (1, 20), (2, 30), (3, 40)]);
        let params = ElectionParams::with_max(100, 0);
        let set = elect(&BigUint::from(25u32), 0, &st, &params).unwrap();
        assert_eq!(set.leader, 1, "rand 25 falls in B's interval (10, 30]");
    }

    #[test]
    fn full_leader_set_matches_oracle() {
        let list = [(0u64, 10u64), (1, 20), (2, 30), (3, 40)];
        let st = stakes(&list);
        let params = ElectionParams::with_max(100, 3);
        for rand in 0..100u64 {
            let set = elect(&BigUint::from(rand), 0, &st, &params).unwrap();
            let expect = oracle_select(rand, 4, &list, 100);
            assert_eq!(set.leader, expect[0], "rand={rand}");
            assert_eq!(set.alternatives, expect[1..].to_vec(), "rand={rand}");
        }
    }

    #[test]
    fn single_staker_always_leads() {
        let st = stakes(&[(7, 42)]);
        let params = ElectionParams::with_max(1000, 0);
        for rand in [0u64, 1, 500, 999] {
            let set = elect(&BigUint::from(rand), 0, &st, &params).unwrap();
            assert_eq!(set.leader, 7);
            assert!(set.alternatives.is_empty());
        }
    }

    #[test]
    fn alt_index_slices_the_sequence() {
        let st = stakes(&[(0, 10), (1, 20), (2, 30), (3, 40)]);
        let params = ElectionParams::with_max(100, 3);
        let base = elect(&BigUint::from(25u32), 0, &st, &params).unwrap();
        let shifted = elect(&BigUint::from(25u32), 1, &st, &params).unwrap();
        assert_eq!(shifted.leader, base.alternatives[0]);
        assert_eq!(shifted.alternatives, base.alternatives[1..].to_vec());
    }

    #[test]
    fn leaders_are_distinct_and_staked() {
        let st = stakes(&[(0, 1), (1, 1), (2, 1), (3, 0), (4, 5)]);
        let params = ElectionParams::with_max(1 << 30, 3);
        for rand in 0..200u64 {
            let set = elect(&BigUint::from(rand * 7919), 0, &st, &params).unwrap();
            let mut all = vec![set.leader];
            all.extend(&set.alternatives);
            let mut dedup = all.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), all.len(), "duplicate in {all:?}");
            assert!(!all.contains(&3), "zero-stake account elected");
        }
    }

    #[test]
    fn selection_caps_when_stakers_run_out() {
        let st = stakes(&[(0, 5), (1, 5)]);
        let params = ElectionParams::with_max(1 << 20, 3);
        let set = elect(&BigUint::from(123u32), 0, &st, &params).unwrap();
        assert_eq!(set.alternatives.len(), 1, "only two eligible accounts");

        let err = elect(&BigUint::from(123u32), 2, &st, &params).unwrap_err();
        assert_eq!(
            err,
            ElectError::AltIndexOutOfRange {
                alt_idx: 2,
                available: 2
            }
        );
    }

    #[test]
    fn no_stake_is_an_error() {
        let st = stakes(&[(0, 0), (1, 0)]);
        let params = ElectionParams::with_max(100, 0);
        assert_eq!(
            elect(&BigUint::from(1u32), 0, &st, &params).unwrap_err(),
            ElectError::NoEligibleStake
        );
    }

    #[test]
    fn committee_of_one_is_the_leader() {
        let st = stakes(&[(0, 10), (1, 20), (2, 30)]);
        let params = ElectionParams::with_max(1 << 16, 2);
        for rand in 0..50u64 {
            let r = BigUint::from(rand * 31);
            let committee = elect_committee(&r, 1, &st, &params).unwrap();
            let set = elect(&r, 0, &st, &params).unwrap();
            assert_eq!(committee, vec![set.leader]);
        }
    }

    #[test]
    fn committee_exhausts_all_stakers() {
        let st = stakes(&[(0, 10), (1, 20), (2, 30)]);
        let params = ElectionParams::with_max(1 << 16, 2);
        let committee = elect_committee(&BigUint::from(5u32), 3, &st, &params).unwrap();
        assert_eq!(committee.len(), 3);
        let mut sorted = committee.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn production_interval_is_deterministic() {
        let st = stakes(&[(0, 100), (1, 200), (2, 300)]);
        let params = ElectionParams::production(2);
        let rand = reduce_rand(b"seed", &params.max);
        let a = elect(&rand, 0, &st, &params).unwrap();
        let b = elect(&rand, 0, &st, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn proportionality_smoke() {
        // Light version of the statistical acceptance check.
        let st = stakes(&[(0, 10), (1, 20), (2, 30), (3, 40)]);
        let params = ElectionParams::production(0);
        let mut counts = [0u32; 4];
        let trials = 10_000u32;
        for i in 0..trials {
            let rand = reduce_rand(&i.to_be_bytes(), &params.max);
            let set = elect(&rand, 0, &st, &params).unwrap();
            counts[set.leader as usize] += 1;
        }
        let expected = [0.1, 0.2, 0.3, 0.4];
        for (i, c) in counts.iter().enumerate() {
            let freq = *c as f64 / trials as f64;
            assert!(
                (freq - expected[i]).abs() < 0.03,
                "account {i}: {freq:.3} vs {}",
                expected[i]
            );
        }
    }
}
