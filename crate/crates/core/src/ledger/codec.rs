//! Canonical binary encoding.
//!
//! Layout rules: fields in declaration order, big-endian fixed-width
//! integers, fixed-length keys/signatures/digests, a 1-byte presence flag for
//! the optional vote reference, and 4-byte big-endian count prefixes for
//! lists. Decoding is strict: truncation, trailing bytes, and out-of-range
//! tags are all rejected.

use thiserror::Error;

use crate::crypto::{Digest, PublicKey, Signature, PUBLIC_KEY_LEN, SIGNATURE_LEN};

use super::{Block, Header, Tx, TxKind};

/// Encoded transaction size without a vote reference.
pub const TX_BASE_LEN: usize = 1 + 32 + 32 + 8 + 8 + 8 + 64;
/// Extra bytes when the vote reference is present: presence byte + hash.
pub const TX_VOTE_REF_EXTRA: usize = 1 + 32;
/// Encoded header size.
pub const HEADER_LEN: usize = 8 + 32 + 32 + 32 + 32 + 64 + 2 + 64;
/// Encoded size of a block with no transactions.
pub const BLOCK_EMPTY_LEN: usize = HEADER_LEN + 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("input ended before field {0}")]
    UnexpectedEnd(&'static str),
    #[error("trailing bytes after a complete value")]
    TrailingBytes,
    #[error("unknown tag {0}")]
    BadTag(u8),
    #[error("presence flag must be 0 or 1, got {0}")]
    BadPresenceFlag(u8),
    #[error("list length {0} exceeds limit")]
    OversizedList(u32),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::UnexpectedEnd(field));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, CodecError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn digest(&mut self, field: &'static str) -> Result<Digest, CodecError> {
        Ok(Digest(self.take(32, field)?.try_into().unwrap()))
    }

    fn pk(&mut self, field: &'static str) -> Result<PublicKey, CodecError> {
        Ok(PublicKey(
            self.take(PUBLIC_KEY_LEN, field)?.try_into().unwrap(),
        ))
    }

    fn sig(&mut self, field: &'static str) -> Result<Signature, CodecError> {
        Ok(Signature(
            self.take(SIGNATURE_LEN, field)?.try_into().unwrap(),
        ))
    }

    fn finish(&self) -> Result<(), CodecError> {
        if self.pos != self.buf.len() {
            return Err(CodecError::TrailingBytes);
        }
        Ok(())
    }
}

// A vote-less transaction carries no presence byte at all; the field count
// is recovered from the fixed tail length. Carrying one costs 33 bytes:
// the presence byte plus the 32-byte hash.
fn put_tx_preimage(out: &mut Vec<u8>, tx: &Tx) {
    out.push(tx.kind.tag());
    out.extend_from_slice(tx.src.as_bytes());
    out.extend_from_slice(tx.dst.as_bytes());
    out.extend_from_slice(&tx.val.to_be_bytes());
    out.extend_from_slice(&tx.fee.to_be_bytes());
    out.extend_from_slice(&tx.nonce.to_be_bytes());
    if let Some(d) = &tx.vote_ref {
        out.push(1);
        out.extend_from_slice(d.as_bytes());
    }
}

/// The signing preimage: the canonical encoding minus the signature.
pub fn tx_signing_bytes(tx: &Tx) -> Vec<u8> {
    let mut out = Vec::with_capacity(TX_BASE_LEN + TX_VOTE_REF_EXTRA);
    put_tx_preimage(&mut out, tx);
    out
}

pub fn encode_tx(tx: &Tx) -> Vec<u8> {
    let mut out = tx_signing_bytes(tx);
    out.extend_from_slice(tx.sig.as_bytes());
    out
}

pub fn decode_tx(buf: &[u8]) -> Result<Tx, CodecError> {
    let mut r = Reader::new(buf);
    let tx = decode_tx_inner(&mut r)?;
    r.finish()?;
    Ok(tx)
}

fn decode_tx_inner(r: &mut Reader) -> Result<Tx, CodecError> {
    let tag = r.u8("tx.kind")?;
    let kind = TxKind::from_tag(tag).ok_or(CodecError::BadTag(tag))?;
    let src = r.pk("tx.src")?;
    let dst = r.pk("tx.dst")?;
    let val = r.u64("tx.val")?;
    let fee = r.u64("tx.fee")?;
    let nonce = r.u64("tx.nonce")?;
    // Remaining bytes disambiguate: signature only, or presence byte +
    // vote hash + signature.
    let remaining = r.buf.len() - r.pos;
    let vote_ref = if remaining >= SIGNATURE_LEN + TX_VOTE_REF_EXTRA {
        let flag = r.u8("tx.vote_ref_flag")?;
        if flag != 1 {
            return Err(CodecError::BadPresenceFlag(flag));
        }
        Some(r.digest("tx.vote_ref")?)
    } else {
        None
    };
    let sig = r.sig("tx.sig")?;
    Ok(Tx {
        kind,
        src,
        dst,
        val,
        fee,
        nonce,
        vote_ref,
        sig,
    })
}

fn put_header_preimage(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(&h.id.to_be_bytes());
    out.extend_from_slice(h.h_prev.as_bytes());
    out.extend_from_slice(h.txs_root.as_bytes());
    out.extend_from_slice(h.state_root.as_bytes());
    out.extend_from_slice(h.coinbase.as_bytes());
    out.extend_from_slice(h.rand.as_bytes());
    out.extend_from_slice(&h.alt_idx.to_be_bytes());
}

/// Header fields covered by the producer's signature (everything before it).
pub fn header_signing_bytes(h: &Header) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN - SIGNATURE_LEN);
    put_header_preimage(&mut out, h);
    out
}

pub fn encode_header(h: &Header) -> Vec<u8> {
    let mut out = header_signing_bytes(h);
    out.extend_from_slice(h.sig.as_bytes());
    out
}

fn decode_header_inner(r: &mut Reader) -> Result<Header, CodecError> {
    Ok(Header {
        id: r.u64("hdr.id")?,
        h_prev: r.digest("hdr.h_prev")?,
        txs_root: r.digest("hdr.txs_root")?,
        state_root: r.digest("hdr.state_root")?,
        coinbase: r.pk("hdr.coinbase")?,
        rand: r.sig("hdr.rand")?,
        alt_idx: r.u16("hdr.alt_idx")?,
        sig: r.sig("hdr.sig")?,
    })
}

/// Guard against absurd counts before allocating.
const MAX_LIST_LEN: u32 = 1 << 20;

// Transactions are not self-delimiting in a stream (the optional vote field
// is resolved by total length), so each one travels length-prefixed inside a
// block.
pub fn encode_block(b: &Block) -> Vec<u8> {
    let mut out = encode_header(&b.header);
    out.extend_from_slice(&(b.txs.len() as u32).to_be_bytes());
    for tx in &b.txs {
        let enc = encode_tx(tx);
        out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
        out.extend_from_slice(&enc);
    }
    out
}

pub fn decode_block(buf: &[u8]) -> Result<Block, CodecError> {
    let mut r = Reader::new(buf);
    let header = decode_header_inner(&mut r)?;
    let count = r.u32("blk.tx_count")?;
    if count > MAX_LIST_LEN {
        return Err(CodecError::OversizedList(count));
    }
    let mut txs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("blk.tx_len")? as usize;
        let slice = r.take(len, "blk.tx")?;
        txs.push(decode_tx(slice)?);
    }
    r.finish()?;
    Ok(Block { header, txs })
}
