//! Experiment infrastructure: scenario configs, the deterministic in-process
//! simulation, a real localhost socket runtime, churn injection, the passive
//! global eavesdropper, metrics collection, and the deanonymization
//! analyses.

mod capture;
mod deanon;
mod metrics;
mod scenario;
mod sim;
mod socket;

pub use capture::{first_spy_success, CaptureRecord, LinkCapture};
pub use deanon::{deanon_monte_carlo, deanon_probability};
pub use metrics::{MetricsRecord, RoundRow, Summary, ROUNDS_CSV_HEADER, SUMMARY_CSV_HEADER};
pub use scenario::{ChurnEvent, LatencyModel, ScenarioConfig, ScenarioError};
pub use sim::{run_scenario, SimOutcome};
pub use socket::{run_socket_node, SocketError, SocketNodeOptions};
