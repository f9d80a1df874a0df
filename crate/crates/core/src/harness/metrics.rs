//! Measured outputs of a run: one row per round of the observer's final
//! chain plus aggregate counters, exported as two CSV files with stable
//! headers.

use crate::ledger::{AccountId, Height};

/// Per-round measurements along the observer's final chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundRow {
    pub height: Height,
    pub producer: AccountId,
    pub alt_idx: u16,
    pub tx_count: usize,
    pub round_ms: u64,
    pub bytes: u64,
}

pub const ROUNDS_CSV_HEADER: &str = "height,producer,alt_idx,tx_count,round_ms,bytes";
pub const SUMMARY_CSV_HEADER: &str = "total_blocks,total_txs,elapsed_ms,throughput_tps,timeouts,\
fork_blocks,tip_switches,checkpoints_finalized,checkpoints_nodecision,bytes_total,frames_total,\
drops,txs_rejected";

/// Aggregates over a whole run. Counters reflect the observer node's view of
/// protocol events; byte/frame/drop counters are network-global.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub total_blocks: u64,
    pub total_txs: u64,
    pub elapsed_ms: u64,
    pub throughput_tps: f64,
    pub timeouts: u64,
    pub fork_blocks: u64,
    pub tip_switches: u64,
    pub checkpoints_finalized: u64,
    pub checkpoints_nodecision: u64,
    pub bytes_total: u64,
    pub frames_total: u64,
    pub drops: u64,
    pub txs_rejected: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub rows: Vec<RoundRow>,
    pub summary: Summary,
}

impl MetricsRecord {
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from(ROUNDS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.height, r.producer, r.alt_idx, r.tx_count, r.round_ms, r.bytes
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let s = &self.summary;
        format!(
            "{SUMMARY_CSV_HEADER}\n{},{},{},{:.3},{},{},{},{},{},{},{},{},{}\n",
            s.total_blocks,
            s.total_txs,
            s.elapsed_ms,
            s.throughput_tps,
            s.timeouts,
            s.fork_blocks,
            s.tip_switches,
            s.checkpoints_finalized,
            s.checkpoints_nodecision,
            s.bytes_total,
            s.frames_total,
            s.drops,
            s.txs_rejected,
        )
    }
}
