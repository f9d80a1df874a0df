//! Account state and the state transition rules.
//!
//! Balance is liquid; stake carries election weight. Moving value between
//! them goes through pending queues: deposits activate after a configured
//! number of blocks, withdrawals stay locked (with zero election weight and
//! zero staking income) before re-joining the balance.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{hash, Digest, PublicKey};

use super::{merkle_root, AccountId, Height, Tx, TxKind};

/// Protocol constants governing the stake lifecycle.
#[derive(Clone, Copy, Debug)]
pub struct ChainRules {
    /// Blocks a deposit waits before it counts toward election weight.
    pub stake_activation_delay: u64,
    /// Blocks a withdrawal stays locked before it re-joins the balance.
    pub stake_unlock_delay: u64,
}

/// A queued stake transition: `amount` becomes effective at `height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PendingStake {
    pub amount: u64,
    pub height: Height,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccountState {
    pub id: AccountId,
    pub pk: PublicKey,
    pub balance: u64,
    pub nonce: u64,
    pub stake: u64,
    pub pending_deposits: Vec<PendingStake>,
    pub pending_withdrawals: Vec<PendingStake>,
}

impl AccountState {
    pub fn new(id: AccountId, pk: PublicKey, balance: u64, stake: u64) -> AccountState {
        AccountState {
            id,
            pk,
            balance,
            nonce: 0,
            stake,
            pending_deposits: Vec::new(),
            pending_withdrawals: Vec::new(),
        }
    }

    /// Canonical encoding used as the state-root Merkle leaf.
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(68 + 16 * (self.pending_deposits.len() + self.pending_withdrawals.len()));
        out.extend_from_slice(&self.id.to_be_bytes());
        out.extend_from_slice(self.pk.as_bytes());
        out.extend_from_slice(&self.balance.to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.stake.to_be_bytes());
        out.extend_from_slice(&(self.pending_deposits.len() as u32).to_be_bytes());
        for p in &self.pending_deposits {
            out.extend_from_slice(&p.amount.to_be_bytes());
            out.extend_from_slice(&p.height.to_be_bytes());
        }
        out.extend_from_slice(&(self.pending_withdrawals.len() as u32).to_be_bytes());
        for p in &self.pending_withdrawals {
            out.extend_from_slice(&p.amount.to_be_bytes());
            out.extend_from_slice(&p.height.to_be_bytes());
        }
        out
    }

    fn locked_total(&self) -> u64 {
        self.pending_deposits
            .iter()
            .chain(self.pending_withdrawals.iter())
            .map(|p| p.amount)
            .sum()
    }
}

#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum TxError {
    #[error("sender not found in state")]
    UnknownSender,
    #[error("bad transaction signature")]
    BadSignature,
    #[error("balance too low for value plus fee")]
    InsufficientBalance,
    #[error("stake too low for withdrawal")]
    InsufficientStake,
    #[error("nonce does not match account nonce")]
    BadNonce,
    #[error("vote reference is not on this chain")]
    StaleVoteRef,
}

/// All account states plus a cached sum of active stakes.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct GlobalState {
    accounts: BTreeMap<AccountId, AccountState>,
    by_pk: BTreeMap<PublicKey, AccountId>,
    stake_sum: u64,
}

impl GlobalState {
    pub fn new() -> GlobalState {
        GlobalState::default()
    }

    pub fn insert_account(&mut self, acct: AccountState) {
        self.stake_sum += acct.stake;
        self.by_pk.insert(acct.pk, acct.id);
        self.accounts.insert(acct.id, acct);
    }

    pub fn account(&self, id: AccountId) -> Option<&AccountState> {
        self.accounts.get(&id)
    }

    pub fn account_by_pk(&self, pk: &PublicKey) -> Option<&AccountState> {
        self.by_pk.get(pk).and_then(|id| self.accounts.get(id))
    }

    pub fn id_of(&self, pk: &PublicKey) -> Option<AccountId> {
        self.by_pk.get(pk).copied()
    }

    pub fn accounts(&self) -> impl Iterator<Item = &AccountState> {
        self.accounts.values()
    }

    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    /// Cached Σ of active stakes; pending deposits and locked withdrawals do
    /// not count.
    pub fn stake_sum(&self) -> u64 {
        self.stake_sum
    }

    /// Map of account id → active stake for every account with nonzero stake.
    pub fn active_stakes(&self) -> BTreeMap<AccountId, u64> {
        self.accounts
            .iter()
            .filter(|(_, a)| a.stake > 0)
            .map(|(id, a)| (*id, a.stake))
            .collect()
    }

    /// Total token supply: balances, stakes, and both pending queues.
    pub fn total_supply(&self) -> u64 {
        self.accounts
            .values()
            .map(|a| a.balance + a.stake + a.locked_total())
            .sum()
    }

    /// Deterministic commitment: Merkle root over canonical account
    /// encodings in ascending account-id order. Any single-account change
    /// changes the root; map iteration order cannot affect it.
    pub fn state_root(&self) -> Digest {
        let leaves: Vec<Digest> = self
            .accounts
            .values()
            .map(|a| hash(&a.encode()))
            .collect();
        merkle_root(&leaves)
    }

    /// Apply stake transitions that become effective at `height`: activate
    /// matured deposits (join stake and the stake sum) and release matured
    /// withdrawals (join balance). Runs at the start of block application.
    pub fn process_pending(&mut self, height: Height) {
        let mut stake_delta = 0u64;
        for acct in self.accounts.values_mut() {
            let mut i = 0;
            while i < acct.pending_deposits.len() {
                if acct.pending_deposits[i].height <= height {
                    let p = acct.pending_deposits.remove(i);
                    acct.stake += p.amount;
                    stake_delta += p.amount;
                } else {
                    i += 1;
                }
            }
            let mut i = 0;
            while i < acct.pending_withdrawals.len() {
                if acct.pending_withdrawals[i].height <= height {
                    let p = acct.pending_withdrawals.remove(i);
                    acct.balance += p.amount;
                } else {
                    i += 1;
                }
            }
        }
        self.stake_sum += stake_delta;
    }

    /// Validate a transaction against the current state without mutating it.
    /// The vote-reference ancestry check is the caller's responsibility.
    pub fn validate_tx(&self, tx: &Tx) -> Result<(), TxError> {
        let src = self.account_by_pk(&tx.src).ok_or(TxError::UnknownSender)?;
        if !tx.verify_sig() {
            return Err(TxError::BadSignature);
        }
        if tx.nonce != src.nonce {
            return Err(TxError::BadNonce);
        }
        match tx.kind {
            TxKind::Transfer | TxKind::StakeDeposit => {
                let need = tx.val.checked_add(tx.fee).ok_or(TxError::InsufficientBalance)?;
                if src.balance < need {
                    return Err(TxError::InsufficientBalance);
                }
            }
            TxKind::StakeWithdraw => {
                if src.stake < tx.val {
                    return Err(TxError::InsufficientStake);
                }
                if src.balance < tx.fee {
                    return Err(TxError::InsufficientBalance);
                }
            }
        }
        Ok(())
    }

    /// Apply one transaction at `height`. On error the state is untouched.
    /// The fee is deducted from the sender here and credited to the block
    /// producer by the reward step.
    pub fn apply_tx(&mut self, tx: &Tx, height: Height, rules: &ChainRules) -> Result<(), TxError> {
        self.validate_tx(tx)?;
        let src_id = self.by_pk[&tx.src];
        match tx.kind {
            TxKind::Transfer => {
                {
                    let src = self.accounts.get_mut(&src_id).expect("validated above");
                    src.balance -= tx.val + tx.fee;
                    src.nonce += 1;
                }
                let dst_id = match self.by_pk.get(&tx.dst) {
                    Some(id) => *id,
                    None => {
                        // First transfer to an unseen key opens the account.
                        let id = self
                            .accounts
                            .keys()
                            .next_back()
                            .map(|m| m + 1)
                            .unwrap_or(0);
                        self.insert_account(AccountState::new(id, tx.dst, 0, 0));
                        id
                    }
                };
                self.accounts.get_mut(&dst_id).expect("just ensured").balance += tx.val;
            }
            TxKind::StakeDeposit => {
                let activation = height + rules.stake_activation_delay;
                let src = self.accounts.get_mut(&src_id).expect("validated above");
                src.balance -= tx.val + tx.fee;
                src.nonce += 1;
                if tx.val > 0 {
                    src.pending_deposits.push(PendingStake {
                        amount: tx.val,
                        height: activation,
                    });
                }
            }
            TxKind::StakeWithdraw => {
                let unlock = height + rules.stake_unlock_delay;
                let src = self.accounts.get_mut(&src_id).expect("validated above");
                src.balance -= tx.fee;
                src.stake -= tx.val;
                src.nonce += 1;
                if tx.val > 0 {
                    src.pending_withdrawals.push(PendingStake {
                        amount: tx.val,
                        height: unlock,
                    });
                }
                self.stake_sum -= tx.val;
            }
        }
        Ok(())
    }

    /// Credit block rewards: the producer receives the full reward plus the
    /// collected fees, each remaining alternative leader the partial reward.
    /// Returns the freshly minted amount (fees are redistributed, not
    /// minted).
    pub fn apply_reward(
        &mut self,
        producer: AccountId,
        alternatives: &[AccountId],
        fees: u64,
        full_reward: u64,
        partial_reward: u64,
    ) -> u64 {
        if let Some(acct) = self.accounts.get_mut(&producer) {
            acct.balance += full_reward + fees;
        }
        for id in alternatives {
            if let Some(acct) = self.accounts.get_mut(id) {
                acct.balance += partial_reward;
            }
        }
        full_reward + alternatives.len() as u64 * partial_reward
    }
}
