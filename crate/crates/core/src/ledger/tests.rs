use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{hash, hash_parts, Digest, Keypair, PublicKey, Signature};

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tx(r: &mut ChaCha8Rng) -> Tx {
    let kind = TxKind::from_tag((r.next_u32() % 3) as u8).unwrap();
    let mut pk1 = [0u8; 32];
    let mut pk2 = [0u8; 32];
    r.fill_bytes(&mut pk1);
    r.fill_bytes(&mut pk2);
    let vote_ref = if r.next_u32() % 2 == 0 {
        let mut d = [0u8; 32];
        r.fill_bytes(&mut d);
        Some(Digest(d))
    } else {
        None
    };
    let mut sig = [0u8; 64];
    r.fill_bytes(&mut sig);
    Tx {
        kind,
        src: PublicKey(pk1),
        dst: PublicKey(pk2),
        val: r.next_u64(),
        fee: r.next_u64(),
        nonce: r.next_u64(),
        vote_ref,
        sig: Signature(sig),
    }
}

fn random_header(r: &mut ChaCha8Rng) -> Header {
    let mut d = [0u8; 32];
    let mut pk = [0u8; 32];
    let mut s1 = [0u8; 64];
    let mut s2 = [0u8; 64];
    r.fill_bytes(&mut d);
    r.fill_bytes(&mut pk);
    r.fill_bytes(&mut s1);
    r.fill_bytes(&mut s2);
    Header {
        id: r.next_u64(),
        h_prev: Digest(d),
        txs_root: hash(b"txs"),
        state_root: hash(b"state"),
        coinbase: PublicKey(pk),
        rand: Signature(s1),
        alt_idx: (r.next_u32() % 8) as u16,
        sig: Signature(s2),
    }
}

#[test]
fn tx_roundtrip_randomized() {
    let mut r = rng(11);
    for _ in 0..10_000 {
        let tx = random_tx(&mut r);
        let enc = encode_tx(&tx);
        assert_eq!(decode_tx(&enc).unwrap(), tx);
    }
}

#[test]
fn header_and_block_roundtrip_randomized() {
    let mut r = rng(12);
    for _ in 0..2_000 {
        let header = random_header(&mut r);
        let txs: Vec<Tx> = (0..(r.next_u32() % 5)).map(|_| random_tx(&mut r)).collect();
        let block = Block { header, txs };
        let enc = encode_block(&block);
        assert_eq!(decode_block(&enc).unwrap(), block);
    }
}

#[test]
fn decode_rejects_truncation_and_trailing() {
    let mut r = rng(13);
    let tx = random_tx(&mut r);
    let enc = encode_tx(&tx);
    assert!(decode_tx(&enc[..enc.len() - 1]).is_err());
    let mut extended = enc.clone();
    extended.push(0);
    assert_eq!(decode_tx(&extended), Err(CodecError::TrailingBytes));
}

#[test]
fn decode_rejects_bad_presence_flag() {
    let mut r = rng(14);
    let mut tx = random_tx(&mut r);
    tx.vote_ref = Some(hash(b"ref"));
    let mut enc = encode_tx(&tx);
    // Presence flag sits before the 32-byte hash and 64-byte signature.
    let flag_at = enc.len() - 64 - 32 - 1;
    enc[flag_at] = 2;
    assert_eq!(decode_tx(&enc), Err(CodecError::BadPresenceFlag(2)));
}

#[test]
fn vote_ref_adds_exactly_33_bytes() {
    let mut r = rng(15);
    let mut tx = random_tx(&mut r);
    tx.vote_ref = None;
    let without = encode_tx(&tx).len();
    tx.vote_ref = Some(hash(b"ref"));
    let with = encode_tx(&tx).len();
    assert_eq!(without, TX_BASE_LEN);
    assert_eq!(with, without + TX_VOTE_REF_EXTRA);
    assert_eq!(TX_VOTE_REF_EXTRA, 33);
}

#[test]
fn nonce_change_touches_only_nonce_bytes_in_preimage() {
    let mut r = rng(16);
    let mut a = random_tx(&mut r);
    a.vote_ref = None;
    let mut b = a.clone();
    b.nonce = a.nonce.wrapping_add(1);
    let ea = tx_signing_bytes(&a);
    let eb = tx_signing_bytes(&b);
    assert_eq!(ea.len(), eb.len());
    let nonce_range = 1 + 32 + 32 + 8 + 8..1 + 32 + 32 + 8 + 8 + 8;
    for (i, (x, y)) in ea.iter().zip(eb.iter()).enumerate() {
        if nonce_range.contains(&i) {
            continue;
        }
        assert_eq!(x, y, "byte {i} outside the nonce field differs");
    }
    assert_ne!(ea[nonce_range.clone()], eb[nonce_range]);
}

#[test]
fn header_digest_covers_signature() {
    let mut r = rng(17);
    let h = random_header(&mut r);
    assert_eq!(h.digest(), hash(&encode_header(&h)));
    let mut h2 = h.clone();
    h2.sig.0[0] ^= 1;
    assert_ne!(h.digest(), h2.digest());
}

#[test]
fn empty_block_encoding_length() {
    let mut r = rng(18);
    let block = Block {
        header: random_header(&mut r),
        txs: vec![],
    };
    assert_eq!(encode_block(&block).len(), BLOCK_EMPTY_LEN);
    assert_eq!(encode_header(&block.header).len(), HEADER_LEN);
}

#[test]
fn tx_tamper_changes_txs_root() {
    let mut r = rng(19);
    let txs: Vec<Tx> = (0..4).map(|_| random_tx(&mut r)).collect();
    let root = compute_txs_root(&txs);
    let mut tampered = txs.clone();
    tampered[2].val ^= 1;
    assert_ne!(root, compute_txs_root(&tampered));
}

#[test]
fn merkle_base_cases() {
    assert_eq!(merkle_root(&[]), hash(b""));
    let leaf = hash(b"leaf");
    assert_eq!(merkle_root(&[leaf]), leaf);
}

// Independent oracle: pad the leaf list to the next power of two by
// duplicating the last leaf, then fold pairwise.
fn merkle_oracle(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return hash(b"");
    }
    let mut padded = leaves.to_vec();
    // Duplicate the last node level by level, which for an odd count is the
    // same as padding within each level; do it literally per level instead.
    while padded.len() > 1 {
        if padded.len() % 2 == 1 {
            padded.push(*padded.last().unwrap());
        }
        let mut next = Vec::new();
        for pair in padded.chunks(2) {
            next.push(hash_parts(&[pair[0].as_bytes(), pair[1].as_bytes()]));
        }
        padded = next;
    }
    padded[0]
}

#[test]
fn merkle_matches_oracle_for_small_sizes() {
    let mut r = rng(20);
    for n in 0..=9 {
        let leaves: Vec<Digest> = (0..n)
            .map(|_| {
                let mut b = [0u8; 32];
                r.fill_bytes(&mut b);
                Digest(b)
            })
            .collect();
        assert_eq!(merkle_root(&leaves), merkle_oracle(&leaves), "n={n}");
    }
}

#[test]
fn three_tx_root_matches_oracle() {
    let mut r = rng(21);
    let txs: Vec<Tx> = (0..3).map(|_| random_tx(&mut r)).collect();
    let leaves: Vec<Digest> = txs.iter().map(|t| hash(&encode_tx(t))).collect();
    assert_eq!(compute_txs_root(&txs), merkle_oracle(&leaves));
}

// --- state transition tests ---

const RULES: ChainRules = ChainRules {
    stake_activation_delay: 5,
    stake_unlock_delay: 20,
};

struct Fixture {
    gs: GlobalState,
    keys: Vec<Keypair>,
}

fn fixture(balances: &[(u64, u64)]) -> Fixture {
    let mut r = rng(99);
    let mut gs = GlobalState::new();
    let mut keys = Vec::new();
    for (i, (balance, stake)) in balances.iter().enumerate() {
        let kp = Keypair::generate(&mut r);
        gs.insert_account(AccountState::new(i as u64, kp.public(), *balance, *stake));
        keys.push(kp);
    }
    Fixture { gs, keys }
}

fn signed_tx(f: &Fixture, from: usize, kind: TxKind, dst: PublicKey, val: u64, fee: u64) -> Tx {
    let nonce = f.gs.account_by_pk(&f.keys[from].public()).unwrap().nonce;
    let mut tx = Tx {
        kind,
        src: f.keys[from].public(),
        dst,
        val,
        fee,
        nonce,
        vote_ref: None,
        sig: Signature::ZERO,
    };
    tx.sign_with(&f.keys[from]);
    tx
}

#[test]
fn identity_transfer_only_bumps_nonce() {
    let mut f = fixture(&[(10, 0), (0, 0)]);
    let tx = signed_tx(&f, 0, TxKind::Transfer, f.keys[1].public(), 0, 0);
    f.gs.apply_tx(&tx, 1, &RULES).unwrap();
    let src = f.gs.account(0).unwrap();
    assert_eq!(src.balance, 10);
    assert_eq!(src.nonce, 1);
    assert_eq!(f.gs.account(1).unwrap().balance, 0);
}

#[test]
fn exact_spend_drains_balance() {
    let mut f = fixture(&[(10, 0), (0, 0)]);
    let tx = signed_tx(&f, 0, TxKind::Transfer, f.keys[1].public(), 7, 3);
    f.gs.apply_tx(&tx, 1, &RULES).unwrap();
    assert_eq!(f.gs.account(0).unwrap().balance, 0);
    assert_eq!(f.gs.account(1).unwrap().balance, 7);
}

#[test]
fn nonce_replay_rejected_without_state_change() {
    let mut f = fixture(&[(10, 0), (0, 0)]);
    let tx = signed_tx(&f, 0, TxKind::Transfer, f.keys[1].public(), 1, 0);
    f.gs.apply_tx(&tx, 1, &RULES).unwrap();
    let root = f.gs.state_root();
    assert_eq!(f.gs.apply_tx(&tx, 2, &RULES), Err(TxError::BadNonce));
    assert_eq!(f.gs.state_root(), root, "failed apply must not touch state");
}

#[test]
fn rejection_reasons() {
    let mut f = fixture(&[(10, 5), (0, 0)]);
    let over = signed_tx(&f, 0, TxKind::Transfer, f.keys[1].public(), 9, 2);
    assert_eq!(f.gs.apply_tx(&over, 1, &RULES), Err(TxError::InsufficientBalance));

    let mut bad_sig = signed_tx(&f, 0, TxKind::Transfer, f.keys[1].public(), 1, 0);
    bad_sig.val = 2;
    assert_eq!(f.gs.apply_tx(&bad_sig, 1, &RULES), Err(TxError::BadSignature));

    let stranger = Keypair::generate(&mut rng(7));
    let mut orphan = Tx {
        kind: TxKind::Transfer,
        src: stranger.public(),
        dst: f.keys[0].public(),
        val: 0,
        fee: 0,
        nonce: 0,
        vote_ref: None,
        sig: Signature::ZERO,
    };
    orphan.sign_with(&stranger);
    assert_eq!(f.gs.apply_tx(&orphan, 1, &RULES), Err(TxError::UnknownSender));

    let too_much_stake = signed_tx(&f, 0, TxKind::StakeWithdraw, f.keys[0].public(), 6, 0);
    assert_eq!(
        f.gs.apply_tx(&too_much_stake, 1, &RULES),
        Err(TxError::InsufficientStake)
    );
}

#[test]
fn transfer_to_unknown_key_opens_account() {
    let mut f = fixture(&[(10, 0)]);
    let newcomer = Keypair::generate(&mut rng(55));
    let tx = signed_tx(&f, 0, TxKind::Transfer, newcomer.public(), 4, 0);
    f.gs.apply_tx(&tx, 1, &RULES).unwrap();
    let opened = f.gs.account_by_pk(&newcomer.public()).unwrap();
    assert_eq!(opened.balance, 4);
    assert_eq!(opened.stake, 0);
}

#[test]
fn deposit_activates_after_delay() {
    let mut f = fixture(&[(100, 10)]);
    let tx = signed_tx(&f, 0, TxKind::StakeDeposit, f.keys[0].public(), 50, 0);
    f.gs.apply_tx(&tx, 10, &RULES).unwrap();
    assert_eq!(f.gs.account(0).unwrap().balance, 50);
    assert_eq!(f.gs.account(0).unwrap().stake, 10);
    assert_eq!(f.gs.stake_sum(), 10);

    for h in 11..=14 {
        f.gs.process_pending(h);
        assert_eq!(f.gs.account(0).unwrap().stake, 10, "height {h}");
    }
    f.gs.process_pending(15);
    assert_eq!(f.gs.account(0).unwrap().stake, 60);
    assert_eq!(f.gs.stake_sum(), 60);
}

#[test]
fn withdrawal_loses_weight_immediately_and_unlocks_later() {
    let mut f = fixture(&[(0, 100)]);
    let tx = signed_tx(&f, 0, TxKind::StakeWithdraw, f.keys[0].public(), 50, 0);
    f.gs.apply_tx(&tx, 10, &RULES).unwrap();
    assert_eq!(f.gs.stake_sum(), 50, "weight drops at withdrawal height");
    assert_eq!(f.gs.account(0).unwrap().balance, 0);

    for h in 11..30 {
        f.gs.process_pending(h);
        assert_eq!(f.gs.account(0).unwrap().balance, 0, "height {h}");
    }
    f.gs.process_pending(30);
    assert_eq!(f.gs.account(0).unwrap().balance, 50);
    assert_eq!(f.gs.account(0).unwrap().stake, 50);
}

#[test]
fn zero_deposit_is_a_noop() {
    let mut f = fixture(&[(10, 0)]);
    let tx = signed_tx(&f, 0, TxKind::StakeDeposit, f.keys[0].public(), 0, 0);
    let supply = f.gs.total_supply();
    f.gs.apply_tx(&tx, 1, &RULES).unwrap();
    assert!(f.gs.account(0).unwrap().pending_deposits.is_empty());
    assert_eq!(f.gs.total_supply(), supply);
    assert_eq!(f.gs.account(0).unwrap().nonce, 1);
}

#[test]
fn supply_counts_pending_amounts() {
    let mut f = fixture(&[(100, 50)]);
    assert_eq!(f.gs.total_supply(), 150);
    let dep = signed_tx(&f, 0, TxKind::StakeDeposit, f.keys[0].public(), 30, 0);
    f.gs.apply_tx(&dep, 1, &RULES).unwrap();
    assert_eq!(f.gs.total_supply(), 150);
    let wd = signed_tx(&f, 0, TxKind::StakeWithdraw, f.keys[0].public(), 20, 0);
    f.gs.apply_tx(&wd, 1, &RULES).unwrap();
    assert_eq!(f.gs.total_supply(), 150);
}

#[test]
fn reward_example_arithmetic() {
    let mut f = fixture(&[(0, 10), (0, 10), (0, 10), (0, 10)]);
    let minted = f.gs.apply_reward(0, &[1, 2, 3], 5, 10, 1);
    assert_eq!(minted, 13);
    assert_eq!(f.gs.account(0).unwrap().balance, 15);
    for id in 1..4 {
        assert_eq!(f.gs.account(id).unwrap().balance, 1);
    }
}

#[test]
fn state_root_is_order_independent_and_binding() {
    let f = fixture(&[(10, 1), (20, 2), (30, 3)]);
    let root = f.gs.state_root();

    // Rebuild inserting accounts in reverse order.
    let mut gs2 = GlobalState::new();
    let accounts: Vec<AccountState> = f.gs.accounts().cloned().collect();
    for a in accounts.iter().rev() {
        gs2.insert_account(a.clone());
    }
    assert_eq!(gs2.state_root(), root);

    let mut gs3 = gs2.clone();
    let mut changed = gs3.account(1).unwrap().clone();
    changed.balance += 1;
    gs3.insert_account(changed);
    assert_ne!(gs3.state_root(), root);
}
