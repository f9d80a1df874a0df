//! End-to-end simulation runs exercising the full node stack (consensus +
//! anonymization + transport) under the deterministic scheduler.

use veilchain_core::anonet::AnonMode;
use veilchain_core::harness::{run_scenario, ChurnEvent, LatencyModel, ScenarioConfig};

fn base_config() -> ScenarioConfig {
    ScenarioConfig {
        name: "it".into(),
        node_count: 6,
        duration_ms: 8_000,
        tx_injection_rate: 200.0,
        client_accounts: 32,
        min_block_interval_ms: 20,
        rng_seed: 11,
        ..ScenarioConfig::default()
    }
}

#[test]
fn baseline_run_grows_identical_chains() {
    let cfg = base_config();
    let out = run_scenario(&cfg).unwrap();
    assert!(
        out.metrics.summary.total_blocks >= 50,
        "only {} blocks in 8s",
        out.metrics.summary.total_blocks
    );
    assert!(out.metrics.summary.total_txs > 100);
    let roots = out.best_state_roots();
    assert!(
        roots.windows(2).all(|w| w[0] == w[1]),
        "state roots diverged: {roots:?}"
    );
    for node in &out.nodes {
        node.engine.audit_supply().unwrap();
    }
    // Checkpoints finalized along the way.
    assert!(out.nodes[0].engine.finalized_height() > 0);
}

#[test]
fn every_anon_mode_converges() {
    for mode in [AnonMode::TorLike, AnonMode::GossipNode, AnonMode::Dandelion] {
        let cfg = ScenarioConfig {
            anon_mode: mode,
            duration_ms: 6_000,
            tx_injection_rate: 50.0,
            ..base_config()
        };
        let out = run_scenario(&cfg).unwrap();
        assert!(
            out.metrics.summary.total_blocks >= 20,
            "{mode:?}: only {} blocks",
            out.metrics.summary.total_blocks
        );
        let roots = out.best_state_roots();
        assert!(
            roots.windows(2).all(|w| w[0] == w[1]),
            "{mode:?}: state roots diverged"
        );
        for node in &out.nodes {
            node.engine.audit_supply().unwrap();
        }
    }
}

#[test]
fn identical_configs_yield_identical_metrics() {
    let cfg = ScenarioConfig {
        duration_ms: 4_000,
        ..base_config()
    };
    let a = run_scenario(&cfg).unwrap();
    let b = run_scenario(&cfg).unwrap();
    assert_eq!(a.metrics.rounds_csv(), b.metrics.rounds_csv());
    assert_eq!(a.metrics.summary_csv(), b.metrics.summary_csv());
    assert_eq!(a.best_state_roots(), b.best_state_roots());
}

#[test]
fn byte_accounting_matches_node_counters() {
    let cfg = ScenarioConfig {
        duration_ms: 3_000,
        record_capture: true,
        anon_mode: AnonMode::TorLike,
        ..base_config()
    };
    let out = run_scenario(&cfg).unwrap();
    let node_total: u64 = out.node_bytes_sent.iter().sum();
    assert_eq!(out.capture.bytes_total, node_total);
    let record_total: u64 = out.capture.records.iter().map(|r| r.size as u64).sum();
    assert_eq!(record_total, out.capture.bytes_total);
}

#[test]
fn empty_churn_schedule_equals_no_churn() {
    let mut with_empty = base_config();
    with_empty.duration_ms = 3_000;
    with_empty.churn = Vec::new();
    let without = run_scenario(&with_empty).unwrap();
    let again = run_scenario(&with_empty).unwrap();
    assert_eq!(without.metrics.rounds_csv(), again.metrics.rounds_csv());
}

#[test]
fn zero_duration_run_is_empty_but_ok() {
    let cfg = ScenarioConfig {
        duration_ms: 0,
        ..base_config()
    };
    let out = run_scenario(&cfg).unwrap();
    assert_eq!(out.metrics.summary.total_blocks, 0);
    assert_eq!(out.metrics.rows.len(), 0);
}

#[test]
fn scheduled_churn_degrades_but_does_not_stall() {
    let cfg = ScenarioConfig {
        duration_ms: 8_000,
        churn: vec![
            ChurnEvent {
                node: 2,
                offline_at_ms: 1_000,
                online_at_ms: 4_000,
            },
            ChurnEvent {
                node: 4,
                offline_at_ms: 2_000,
                online_at_ms: 5_000,
            },
        ],
        ..base_config()
    };
    let out = run_scenario(&cfg).unwrap();
    assert!(out.metrics.summary.total_blocks >= 20);
    // The returning nodes caught back up with the network.
    let best: Vec<u64> = out.nodes.iter().map(|n| n.engine.best_height()).collect();
    let max = *best.iter().max().unwrap();
    for (i, h) in best.iter().enumerate() {
        assert!(
            max - h <= 2,
            "node {i} stuck at {h} while the network is at {max}"
        );
    }
    // Some rounds were produced by alternatives.
    assert!(out.metrics.rows.iter().any(|r| r.alt_idx > 0));
}

#[test]
fn fixed_latency_model_works() {
    let cfg = ScenarioConfig {
        latency: LatencyModel::FixedMs(5),
        duration_ms: 2_000,
        ..base_config()
    };
    let out = run_scenario(&cfg).unwrap();
    assert!(out.metrics.summary.total_blocks > 5);
}

#[test]
fn max_rounds_stops_early() {
    let cfg = ScenarioConfig {
        duration_ms: 60_000,
        max_rounds: Some(12),
        ..base_config()
    };
    let out = run_scenario(&cfg).unwrap();
    assert!(out.nodes[0].engine.best_height() >= 12);
    assert!(out.metrics.summary.elapsed_ms < 60_000);
}
