//! Binary Merkle commitments.
//!
//! Conventions: the root of an empty list is the hash of the empty byte
//! sequence, a single leaf is its own root, and an odd level duplicates its
//! last node.

use crate::crypto::{hash, hash_parts, Digest};

use super::{encode_tx, Tx};

pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return hash(b"");
    }
    let mut level: Vec<Digest> = leaves.to_vec();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().expect("level is non-empty"));
        }
        level = level
            .chunks(2)
            .map(|pair| hash_parts(&[pair[0].as_bytes(), pair[1].as_bytes()]))
            .collect();
    }
    level[0]
}

/// Merkle root over the canonical encodings of a block's transactions.
pub fn compute_txs_root(txs: &[Tx]) -> Digest {
    let leaves: Vec<Digest> = txs.iter().map(|tx| hash(&encode_tx(tx))).collect();
    merkle_root(&leaves)
}
