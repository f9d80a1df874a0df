//! Real localhost transport: one OS thread per node runs the event loop,
//! frames travel over TCP with a 4-byte length prefix, and timers come from
//! the wall clock. Consensus outcomes must match the simulated transport;
//! only timing differs.

use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::anonet::AnonConfig;
use crate::consensus::ProtocolParams;
use crate::crypto::Keypair;
use crate::genesis::Genesis;
use crate::ledger::{AccountId, Height};
use crate::node::{Action, MetricEvent, ProtocolNode};
use crate::wire::Addr;

const MAX_FRAME: usize = 16 << 20;
const CONNECT_TIMEOUT: Duration = Duration::from_millis(300);

#[derive(Debug, Error)]
pub enum SocketError {
    #[error("node {0} is not in the genesis directory")]
    NotInDirectory(AccountId),
    #[error("cannot bind {0}: {1}")]
    Bind(String, String),
}

pub struct SocketNodeOptions {
    pub genesis: Genesis,
    pub id: AccountId,
    pub keypair: Keypair,
    pub params: ProtocolParams,
    pub anon: AnonConfig,
    /// Stop once the best chain reaches this height (tests); `None` runs
    /// until `shutdown` flips.
    pub stop_at_height: Option<Height>,
    /// Print `HEIGHT=… ALT=…` lines for accepted blocks.
    pub log: bool,
    pub rng_seed: u64,
}

fn to_socket_addr(a: Addr) -> SocketAddr {
    SocketAddr::from((a.ip, a.port))
}

/// Best-effort frame push: open, write, close. Dead peers fail fast and the
/// loss is left to the protocol's timeouts.
fn push_frame(dst: Addr, bytes: &[u8]) {
    let addr = to_socket_addr(dst);
    let Ok(mut stream) = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) else {
        return;
    };
    let _ = stream.set_nodelay(true);
    let len = (bytes.len() as u32).to_be_bytes();
    let _ = stream.write_all(&len).and_then(|_| stream.write_all(bytes));
}

fn read_frames(mut stream: TcpStream, tx: mpsc::Sender<Vec<u8>>) {
    loop {
        let mut len_buf = [0u8; 4];
        if stream.read_exact(&mut len_buf).is_err() {
            return;
        }
        let len = u32::from_be_bytes(len_buf) as usize;
        if len > MAX_FRAME {
            return;
        }
        let mut frame = vec![0u8; len];
        if stream.read_exact(&mut frame).is_err() {
            return;
        }
        if tx.send(frame).is_err() {
            return;
        }
    }
}

/// Run one node over real sockets until `shutdown` flips or the stop height
/// is reached. Returns the node for post-run inspection.
pub fn run_socket_node(
    opts: SocketNodeOptions,
    shutdown: Arc<AtomicBool>,
) -> Result<ProtocolNode, SocketError> {
    let entry = opts
        .genesis
        .entry(opts.id)
        .ok_or(SocketError::NotInDirectory(opts.id))?
        .clone();
    let listener = TcpListener::bind(to_socket_addr(entry.addr))
        .map_err(|e| SocketError::Bind(entry.addr.to_string(), e.to_string()))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| SocketError::Bind(entry.addr.to_string(), e.to_string()))?;

    let (frame_tx, frame_rx) = mpsc::channel::<Vec<u8>>();
    let accept_shutdown = shutdown.clone();
    let accept_handle = std::thread::spawn(move || {
        while !accept_shutdown.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let tx = frame_tx.clone();
                    std::thread::spawn(move || read_frames(stream, tx));
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
    });

    let mut node = ProtocolNode::new(
        &opts.genesis,
        opts.id,
        opts.keypair.clone(),
        opts.params,
        opts.anon.clone(),
        opts.rng_seed,
    );

    let started = Instant::now();
    let now_us = |s: Instant| s.elapsed().as_micros() as u64;
    // (deadline, timer id) min-heap via Reverse ordering.
    let mut timers: BinaryHeap<std::cmp::Reverse<(u64, u64)>> = BinaryHeap::new();

    let apply = |actions: Vec<Action>, timers: &mut BinaryHeap<std::cmp::Reverse<(u64, u64)>>, t: u64| {
        for action in actions {
            match action {
                Action::SendFrame { dst, env, .. } => push_frame(dst, &env.encode()),
                Action::StartTimer { id, delay_us } => {
                    timers.push(std::cmp::Reverse((t + delay_us, id)));
                }
                Action::CancelTimer { .. } => {}
                Action::Metric(ev) => {
                    if opts.log {
                        log_metric(opts.id, &ev);
                    }
                }
            }
        }
    };

    let actions = node.start(now_us(started));
    apply(actions, &mut timers, now_us(started));

    loop {
        if shutdown.load(Ordering::Relaxed) {
            break;
        }
        if let Some(stop) = opts.stop_at_height {
            if node.engine.best_height() >= stop {
                break;
            }
        }
        let t = now_us(started);
        // Fire due timers.
        while let Some(std::cmp::Reverse((deadline, id))) = timers.peek().copied() {
            if deadline > t {
                break;
            }
            timers.pop();
            let actions = node.on_timer(id, t);
            apply(actions, &mut timers, t);
        }
        let wait = timers
            .peek()
            .map(|std::cmp::Reverse((deadline, _))| Duration::from_micros(deadline.saturating_sub(t)))
            .unwrap_or(Duration::from_millis(100))
            .min(Duration::from_millis(100));
        match frame_rx.recv_timeout(wait) {
            Ok(frame) => {
                let t = now_us(started);
                let actions = node.on_frame(&frame, t);
                apply(actions, &mut timers, t);
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    shutdown.store(true, Ordering::Relaxed);
    let _ = accept_handle.join();
    Ok(node)
}

fn log_metric(id: AccountId, ev: &MetricEvent) {
    match ev {
        MetricEvent::BlockAccepted {
            height,
            digest,
            producer,
            alt_idx,
            tx_count,
        }
        | MetricEvent::BlockCreated {
            height,
            digest,
            producer,
            alt_idx,
            tx_count,
        } => {
            println!(
                "NODE={id} HEIGHT={height} ALT={alt_idx} PRODUCER={producer} TXS={tx_count} HASH={}",
                &digest.to_hex()[..16]
            );
        }
        MetricEvent::CheckpointFinalized { height, digest } => {
            println!(
                "NODE={id} CHECKPOINT={height} HASH={}",
                &digest.to_hex()[..16]
            );
        }
        MetricEvent::TimeoutExpired { height, alt_idx } => {
            println!("NODE={id} TIMEOUT_HEIGHT={height} NEXT_ALT={alt_idx}");
        }
        _ => {}
    }
}
