//! The global passive eavesdropper: a record of every simulated link
//! traversal, and the first-spy estimator that tries to attribute each block
//! to its originator from traffic alone.

use std::collections::BTreeMap;

use crate::crypto::Digest;
use crate::ledger::AccountId;
use crate::wire::{Addr, EnvelopeKind};

/// One frame crossing one link.
#[derive(Clone, Debug)]
pub struct CaptureRecord {
    pub t_us: u64,
    pub src: Addr,
    pub dst: Addr,
    pub kind: EnvelopeKind,
    pub size: usize,
    /// True when the payload is readable by the observer (Plain frames).
    pub plaintext: bool,
    /// Which gossip message the frame belongs to, when the adversary's
    /// traffic-correlation is assumed to identify it. Never on the wire.
    pub about: Option<Digest>,
}

/// Everything the eavesdropper saw. Byte and frame counters are always
/// maintained; individual records only when recording is enabled.
#[derive(Debug, Default)]
pub struct LinkCapture {
    pub records: Vec<CaptureRecord>,
    pub bytes_total: u64,
    pub frames_total: u64,
    recording: bool,
}

impl LinkCapture {
    pub fn new(recording: bool) -> LinkCapture {
        LinkCapture {
            recording,
            ..LinkCapture::default()
        }
    }

    pub fn observe(&mut self, record: CaptureRecord) {
        self.bytes_total += record.size as u64;
        self.frames_total += 1;
        if self.recording {
            self.records.push(record);
        }
    }

    /// `t_ms,src,dst,kind,size,plaintext` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,src,dst,kind,size,plaintext\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t_us / 1000,
                r.src,
                r.dst,
                r.kind.name(),
                r.size,
                r.plaintext as u8
            ));
        }
        out
    }
}

/// First-spy attack: for each block, the adversary guesses that the first
/// address seen emitting the block's plaintext originated it; when no
/// plaintext ever appears (fully link-encrypted dissemination) it falls back
/// to the first encrypted fan-out source. Returns the fraction of blocks
/// whose producer was guessed correctly.
pub fn first_spy_success(
    capture: &LinkCapture,
    truth: &[(Digest, AccountId)],
    node_of_addr: &BTreeMap<Addr, AccountId>,
) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (digest, producer) in truth {
        let first_plain = capture
            .records
            .iter()
            .find(|r| r.kind == EnvelopeKind::Plain && r.about == Some(*digest));
        let guess_record = first_plain.or_else(|| {
            capture
                .records
                .iter()
                .find(|r| r.kind == EnvelopeKind::LinkEncrypted && r.about == Some(*digest))
        });
        if let Some(record) = guess_record {
            if node_of_addr.get(&record.src) == Some(producer) {
                correct += 1;
            }
        }
    }
    correct as f64 / truth.len() as f64
}
