//! Wire formats: network addresses, the envelope framing every link carries,
//! and the protocol messages envelopes transport.
//!
//! Envelope layout (bit-exact): kind 1 B, source address 6 B (IPv4 + port,
//! big-endian), payload length 4 B big-endian, payload. Kind tags: Relay = 1,
//! Transport = 2, Plain = 3, LinkEncrypted = 4.

use thiserror::Error;

use crate::crypto::{Digest, Signature, SIGNATURE_LEN};
use crate::forkchoice::CheckpointVote;
use crate::ledger::{decode_block, decode_tx, encode_block, encode_tx, Block, CodecError, Tx};

/// IPv4 address + port; 6 bytes on the wire. Simulated transports use
/// synthetic addresses in the same format.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Addr {
    pub ip: [u8; 4],
    pub port: u16,
}

impl Addr {
    pub const LEN: usize = 6;

    pub fn new(ip: [u8; 4], port: u16) -> Addr {
        Addr { ip, port }
    }

    /// Synthetic address for simulated node `i`.
    pub fn synthetic(i: u64) -> Addr {
        Addr {
            ip: [10, 0, (i >> 8) as u8, i as u8],
            port: 9000,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.ip);
        out.extend_from_slice(&self.port.to_be_bytes());
    }

    pub fn decode(bytes: &[u8]) -> Option<Addr> {
        if bytes.len() < Self::LEN {
            return None;
        }
        Some(Addr {
            ip: bytes[..4].try_into().unwrap(),
            port: u16::from_be_bytes(bytes[4..6].try_into().unwrap()),
        })
    }
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}.{}.{}.{}:{}",
            self.ip[0], self.ip[1], self.ip[2], self.ip[3], self.port
        )
    }
}

impl std::fmt::Debug for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Display::fmt(self, f)
    }
}

impl std::str::FromStr for Addr {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Addr, WireError> {
        let (host, port) = s.rsplit_once(':').ok_or(WireError::BadAddress)?;
        let port: u16 = port.parse().map_err(|_| WireError::BadAddress)?;
        let mut ip = [0u8; 4];
        let mut parts = host.split('.');
        for slot in ip.iter_mut() {
            *slot = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or(WireError::BadAddress)?;
        }
        if parts.next().is_some() {
            return Err(WireError::BadAddress);
        }
        Ok(Addr { ip, port })
    }
}

/// How a link frame is to be interpreted by its receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvelopeKind {
    /// One onion layer; the addressee strips it and forwards or exits.
    Relay,
    /// Point-to-point control traffic (key exchange, catch-up sync).
    Transport,
    /// Cleartext protocol message.
    Plain,
    /// Protocol message sealed under the pairwise link key of the two
    /// endpoints.
    LinkEncrypted,
}

impl EnvelopeKind {
    pub fn tag(self) -> u8 {
        match self {
            EnvelopeKind::Relay => 1,
            EnvelopeKind::Transport => 2,
            EnvelopeKind::Plain => 3,
            EnvelopeKind::LinkEncrypted => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<EnvelopeKind> {
        match tag {
            1 => Some(EnvelopeKind::Relay),
            2 => Some(EnvelopeKind::Transport),
            3 => Some(EnvelopeKind::Plain),
            4 => Some(EnvelopeKind::LinkEncrypted),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvelopeKind::Relay => "relay",
            EnvelopeKind::Transport => "transport",
            EnvelopeKind::Plain => "plain",
            EnvelopeKind::LinkEncrypted => "link",
        }
    }
}

/// The unit every link carries. `src` is the address of the node that put the
/// frame on this link (rewritten hop by hop), which receivers use to look up
/// link and circuit keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub src: Addr,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.kind.tag());
        self.src.encode_into(&mut out);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
        if bytes.len() < 11 {
            return Err(WireError::Truncated);
        }
        let kind = EnvelopeKind::from_tag(bytes[0]).ok_or(WireError::BadKind(bytes[0]))?;
        let src = Addr::decode(&bytes[1..7]).expect("length checked");
        let len = u32::from_be_bytes(bytes[7..11].try_into().unwrap()) as usize;
        if bytes.len() != 11 + len {
            return Err(WireError::LengthMismatch);
        }
        Ok(Envelope {
            kind,
            src,
            payload: bytes[11..].to_vec(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        11 + self.payload.len()
    }
}

const MSG_BLOCK: u8 = 0x01;
const MSG_TX: u8 = 0x02;
const MSG_VOTE: u8 = 0x03;
const MSG_KX_INIT: u8 = 0x10;
const MSG_KX_ACK: u8 = 0x11;
const MSG_SYNC_REQ: u8 = 0x20;
const MSG_SYNC_RESP: u8 = 0x21;

/// Tag value of checkpoint votes; also the leading byte of their canonical
/// encoding.
pub const VOTE_TAG: u8 = MSG_VOTE;

/// Maximum blocks returned by one sync response.
pub const SYNC_BATCH_LIMIT: usize = 64;

/// A protocol message, as carried in envelope payloads (possibly under one or
/// more encryption layers).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetMsg {
    Block(Block),
    Tx(Tx),
    Vote(CheckpointVote),
    KxInit {
        exchange_id: u64,
        eph_pk: [u8; 32],
        /// The address circuit frames for this key will arrive from.
        predecessor: Addr,
    },
    KxAck {
        exchange_id: u64,
        dh_pk: [u8; 32],
        sig: Signature,
    },
    SyncRequest {
        from_height: u64,
        requester: u64,
    },
    SyncResponse {
        finalized_height: u64,
        finalized_digest: Digest,
        blocks: Vec<Block>,
    },
}

impl NetMsg {
    /// True for the messages disseminated by gossip (versus point-to-point
    /// control traffic).
    pub fn is_gossip(&self) -> bool {
        matches!(self, NetMsg::Block(_) | NetMsg::Tx(_) | NetMsg::Vote(_))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            NetMsg::Block(b) => {
                out.push(MSG_BLOCK);
                out.extend_from_slice(&encode_block(b));
            }
            NetMsg::Tx(tx) => {
                out.push(MSG_TX);
                out.extend_from_slice(&encode_tx(tx));
            }
            NetMsg::Vote(v) => {
                out.push(MSG_VOTE);
                v.encode_body(&mut out);
            }
            NetMsg::KxInit {
                exchange_id,
                eph_pk,
                predecessor,
            } => {
                out.push(MSG_KX_INIT);
                out.extend_from_slice(&exchange_id.to_be_bytes());
                out.extend_from_slice(eph_pk);
                predecessor.encode_into(&mut out);
            }
            NetMsg::KxAck {
                exchange_id,
                dh_pk,
                sig,
            } => {
                out.push(MSG_KX_ACK);
                out.extend_from_slice(&exchange_id.to_be_bytes());
                out.extend_from_slice(dh_pk);
                out.extend_from_slice(sig.as_bytes());
            }
            NetMsg::SyncRequest {
                from_height,
                requester,
            } => {
                out.push(MSG_SYNC_REQ);
                out.extend_from_slice(&from_height.to_be_bytes());
                out.extend_from_slice(&requester.to_be_bytes());
            }
            NetMsg::SyncResponse {
                finalized_height,
                finalized_digest,
                blocks,
            } => {
                out.push(MSG_SYNC_RESP);
                out.extend_from_slice(&finalized_height.to_be_bytes());
                out.extend_from_slice(finalized_digest.as_bytes());
                out.extend_from_slice(&(blocks.len() as u32).to_be_bytes());
                for b in blocks {
                    let enc = encode_block(b);
                    out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
                    out.extend_from_slice(&enc);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<NetMsg, WireError> {
        let (&tag, rest) = bytes.split_first().ok_or(WireError::Truncated)?;
        match tag {
            MSG_BLOCK => Ok(NetMsg::Block(decode_block(rest)?)),
            MSG_TX => Ok(NetMsg::Tx(decode_tx(rest)?)),
            MSG_VOTE => Ok(NetMsg::Vote(CheckpointVote::decode_body(rest)?)),
            MSG_KX_INIT => {
                if rest.len() != 8 + 32 + Addr::LEN {
                    return Err(WireError::LengthMismatch);
                }
                Ok(NetMsg::KxInit {
                    exchange_id: u64::from_be_bytes(rest[..8].try_into().unwrap()),
                    eph_pk: rest[8..40].try_into().unwrap(),
                    predecessor: Addr::decode(&rest[40..]).ok_or(WireError::Truncated)?,
                })
            }
            MSG_KX_ACK => {
                if rest.len() != 8 + 32 + SIGNATURE_LEN {
                    return Err(WireError::LengthMismatch);
                }
                Ok(NetMsg::KxAck {
                    exchange_id: u64::from_be_bytes(rest[..8].try_into().unwrap()),
                    dh_pk: rest[8..40].try_into().unwrap(),
                    sig: Signature(rest[40..].try_into().unwrap()),
                })
            }
            MSG_SYNC_REQ => {
                if rest.len() != 16 {
                    return Err(WireError::LengthMismatch);
                }
                Ok(NetMsg::SyncRequest {
                    from_height: u64::from_be_bytes(rest[..8].try_into().unwrap()),
                    requester: u64::from_be_bytes(rest[8..].try_into().unwrap()),
                })
            }
            MSG_SYNC_RESP => {
                if rest.len() < 8 + 32 + 4 {
                    return Err(WireError::Truncated);
                }
                let finalized_height = u64::from_be_bytes(rest[..8].try_into().unwrap());
                let finalized_digest =
                    Digest::from_slice(&rest[8..40]).ok_or(WireError::Truncated)?;
                let count = u32::from_be_bytes(rest[40..44].try_into().unwrap()) as usize;
                if count > SYNC_BATCH_LIMIT {
                    return Err(WireError::LengthMismatch);
                }
                let mut blocks = Vec::with_capacity(count);
                let mut at = 44;
                for _ in 0..count {
                    if rest.len() < at + 4 {
                        return Err(WireError::Truncated);
                    }
                    let len = u32::from_be_bytes(rest[at..at + 4].try_into().unwrap()) as usize;
                    at += 4;
                    if rest.len() < at + len {
                        return Err(WireError::Truncated);
                    }
                    blocks.push(decode_block(&rest[at..at + len])?);
                    at += len;
                }
                if at != rest.len() {
                    return Err(WireError::LengthMismatch);
                }
                Ok(NetMsg::SyncResponse {
                    finalized_height,
                    finalized_digest,
                    blocks,
                })
            }
            other => Err(WireError::BadKind(other)),
        }
    }

    /// Gossip identity used for duplicate suppression.
    pub fn gossip_digest(&self) -> Digest {
        crate::crypto::hash(&self.encode())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown kind/tag {0}")]
    BadKind(u8),
    #[error("declared length does not match frame")]
    LengthMismatch,
    #[error("malformed address literal")]
    BadAddress,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    #[test]
    fn addr_encodes_to_six_bytes_and_parses() {
        let a = Addr::new([192, 168, 1, 9], 7001);
        let mut buf = Vec::new();
        a.encode_into(&mut buf);
        assert_eq!(buf.len(), Addr::LEN);
        assert_eq!(Addr::decode(&buf), Some(a));
        assert_eq!("192.168.1.9:7001".parse::<Addr>().unwrap(), a);
        assert!("192.168.1:70".parse::<Addr>().is_err());
        assert!("a.b.c.d:1".parse::<Addr>().is_err());
    }

    #[test]
    fn envelope_roundtrip_and_strictness() {
        let env = Envelope {
            kind: EnvelopeKind::Plain,
            src: Addr::synthetic(3),
            payload: vec![1, 2, 3],
        };
        let enc = env.encode();
        assert_eq!(enc.len(), env.encoded_len());
        assert_eq!(Envelope::decode(&enc).unwrap(), env);

        let mut long = enc.clone();
        long.push(0);
        assert_eq!(Envelope::decode(&long), Err(WireError::LengthMismatch));
        assert_eq!(Envelope::decode(&enc[..5]), Err(WireError::Truncated));

        let mut bad = enc;
        bad[0] = 9;
        assert_eq!(Envelope::decode(&bad), Err(WireError::BadKind(9)));
    }

    #[test]
    fn control_messages_roundtrip() {
        let msgs = vec![
            NetMsg::KxInit {
                exchange_id: 42,
                eph_pk: [7u8; 32],
                predecessor: Addr::synthetic(1),
            },
            NetMsg::KxAck {
                exchange_id: 42,
                dh_pk: [8u8; 32],
                sig: Signature([9u8; 64]),
            },
            NetMsg::SyncRequest {
                from_height: 17,
                requester: 2,
            },
            NetMsg::SyncResponse {
                finalized_height: 10,
                finalized_digest: hash(b"tip"),
                blocks: vec![],
            },
        ];
        for m in msgs {
            assert_eq!(NetMsg::decode(&m.encode()).unwrap(), m);
        }
    }
}
