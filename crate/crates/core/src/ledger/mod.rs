//! Ledger data model: transactions, headers, blocks, and per-account state,
//! with a canonical bit-exact binary encoding and Merkle commitments.

mod codec;
mod merkle;
mod state;

pub use codec::{
    decode_block, decode_tx, encode_block, encode_header, encode_tx, header_signing_bytes,
    tx_signing_bytes, CodecError, BLOCK_EMPTY_LEN, HEADER_LEN, TX_BASE_LEN, TX_VOTE_REF_EXTRA,
};
pub use merkle::{compute_txs_root, merkle_root};
pub use state::{AccountState, ChainRules, GlobalState, PendingStake, TxError};

use crate::crypto::{hash, Digest, Keypair, PublicKey, Signature};

pub type AccountId = u64;
pub type Height = u64;

/// Discriminates ordinary transfers from the dedicated stake transactions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TxKind {
    Transfer,
    StakeDeposit,
    StakeWithdraw,
}

impl TxKind {
    pub fn tag(self) -> u8 {
        match self {
            TxKind::Transfer => 0,
            TxKind::StakeDeposit => 1,
            TxKind::StakeWithdraw => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<TxKind> {
        match tag {
            0 => Some(TxKind::Transfer),
            1 => Some(TxKind::StakeDeposit),
            2 => Some(TxKind::StakeWithdraw),
            _ => None,
        }
    }
}

/// A signed transaction. `vote_ref`, when present, marks a context-sensitive
/// transaction voting for the chain containing the referenced block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tx {
    pub kind: TxKind,
    pub src: PublicKey,
    pub dst: PublicKey,
    pub val: u64,
    pub fee: u64,
    pub nonce: u64,
    pub vote_ref: Option<Digest>,
    pub sig: Signature,
}

impl Tx {
    /// Sign the canonical preimage (everything but the signature itself).
    pub fn sign_with(&mut self, kp: &Keypair) {
        self.sig = kp.sign(&tx_signing_bytes(self));
    }

    pub fn verify_sig(&self) -> bool {
        crate::crypto::verify(&self.src, &tx_signing_bytes(self), &self.sig)
    }

    /// Identity of the transaction: hash of its full canonical encoding.
    pub fn digest(&self) -> Digest {
        hash(&encode_tx(self))
    }
}

/// Block header. `rand` is the producer's signature over the predecessor's
/// `rand` and seeds the next round's election; `alt_idx` records which
/// alternative leader produced the block (0 = main leader).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub id: Height,
    pub h_prev: Digest,
    pub txs_root: Digest,
    pub state_root: Digest,
    pub coinbase: PublicKey,
    pub rand: Signature,
    pub alt_idx: u16,
    pub sig: Signature,
}

impl Header {
    /// Hash of the full encoded header (including the signature); this is the
    /// value the next block's `h_prev` links to.
    pub fn digest(&self) -> Digest {
        hash(&encode_header(self))
    }

    pub fn sign_with(&mut self, kp: &Keypair) {
        self.sig = kp.sign(&header_signing_bytes(self));
    }

    pub fn verify_sig(&self) -> bool {
        crate::crypto::verify(&self.coinbase, &header_signing_bytes(self), &self.sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub header: Header,
    pub txs: Vec<Tx>,
}

impl Block {
    pub fn digest(&self) -> Digest {
        self.header.digest()
    }
}

#[cfg(test)]
mod tests;
