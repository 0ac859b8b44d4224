//! Compute-node runtime.
//!
//! A node binds three listeners (model, weights, data). Configuration reads
//! the architecture and next-hop address from the model connection while a
//! second thread reads the weights connection; the two join before the
//! partition is built. After acknowledging, the node opens its downstream
//! connection, accepts one upstream data connection, and relays inference
//! results through two stages (reader, inference/sender) joined by a bounded
//! FIFO queue.

use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{self, CodecSpec, EncodedBlob};
use crate::exec::Exec;
use crate::messages::{self, append_report, ArchEnvelope, NodeReport, PayloadError};
use crate::model::{run_model_with, ModelError, ModelGraph, WeightMap};
use crate::wire::{write_frame, ChunkConfig, FrameReader, FrameWriter, Message, MessageKind, WireError};

pub const DEFAULT_QUEUE_DEPTH: usize = 16;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("configuration rejected: {0}")]
    ConfigRejected(String),
    #[error("unexpected {got:?} message while waiting for {expected}")]
    Protocol { expected: &'static str, got: MessageKind },
    #[error("connection closed during configuration")]
    ConfigAborted,
    #[error("cannot reach next hop {addr}: {source}")]
    NextHopUnreachable { addr: SocketAddr, source: std::io::Error },
    #[error("upstream closed without Shutdown")]
    UpstreamClosed,
    #[error("failed to decode inference data: {0}")]
    Decode(String),
    #[error("inference failed: {0}")]
    Inference(#[from] ModelError),
    #[error("illegal phase transition {from:?} -> {to:?}")]
    PhaseOrder { from: Phase, to: Phase },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Phase {
    AwaitingConfig = 0,
    Ready = 1,
    Running = 2,
    Stopped = 3,
}

/// Atomic phase flag that only moves forward.
#[derive(Debug, Default)]
pub struct PhaseCell(AtomicU8);

impl PhaseCell {
    pub fn get(&self) -> Phase {
        match self.0.load(Ordering::Acquire) {
            0 => Phase::AwaitingConfig,
            1 => Phase::Ready,
            2 => Phase::Running,
            _ => Phase::Stopped,
        }
    }

    pub fn advance(&self, to: Phase) -> Result<(), NodeError> {
        let from = self.get();
        if to <= from {
            return Err(NodeError::PhaseOrder { from, to });
        }
        self.0.store(to as u8, Ordering::Release);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NodeOptions {
    /// Synthetic compute time added per layer of the partition.
    pub delay_per_layer: Duration,
    /// Extra uniformly random delay in `[0, jitter]` per message.
    pub jitter: Duration,
    pub queue_depth: usize,
    pub chunk: ChunkConfig,
    pub seed: u64,
    /// Record per-message timing in [`NodeOutcome::trace`].
    pub trace: bool,
    pub exec: Exec,
}

impl Default for NodeOptions {
    fn default() -> Self {
        NodeOptions {
            delay_per_layer: Duration::ZERO,
            jitter: Duration::ZERO,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            chunk: ChunkConfig::default(),
            seed: 0,
            trace: false,
            exec: Exec::default(),
        }
    }
}

/// Per-message timestamps relative to the start of the relay loop.
#[derive(Clone, Copy, Debug)]
pub struct TraceEvent {
    pub sequence: u64,
    pub received: Duration,
    pub started: Duration,
    pub finished: Duration,
}

#[derive(Debug)]
pub struct NodeOutcome {
    pub report: NodeReport,
    pub trace: Vec<TraceEvent>,
    /// Sequence numbers forwarded downstream, in send order.
    pub forwarded: Vec<u64>,
}

pub struct NodeListeners {
    pub model: TcpListener,
    pub weights: TcpListener,
    pub data: TcpListener,
}

impl NodeListeners {
    /// Port 0 picks an ephemeral port.
    pub fn bind(host: &str, model_port: u16, weights_port: u16, data_port: u16) -> std::io::Result<Self> {
        Ok(NodeListeners {
            model: TcpListener::bind((host, model_port))?,
            weights: TcpListener::bind((host, weights_port))?,
            data: TcpListener::bind((host, data_port))?,
        })
    }

    pub fn ports(&self) -> std::io::Result<(u16, u16, u16)> {
        Ok((
            self.model.local_addr()?.port(),
            self.weights.local_addr()?.port(),
            self.data.local_addr()?.port(),
        ))
    }
}

/// A node whose partition is built and whose downstream link is open.
pub struct Configured {
    pub envelope: ArchEnvelope,
    pub graph: ModelGraph,
    pub next_hop: SocketAddr,
    pub downstream: FrameWriter<TcpStream>,
}

pub struct ComputeNode {
    listeners: NodeListeners,
    options: NodeOptions,
    phase: Arc<PhaseCell>,
}

impl ComputeNode {
    pub fn new(listeners: NodeListeners, options: NodeOptions) -> Self {
        ComputeNode {
            listeners,
            options,
            phase: Arc::new(PhaseCell::default()),
        }
    }

    pub fn phase(&self) -> Arc<PhaseCell> {
        self.phase.clone()
    }

    /// Serves one configuration and inference session.
    pub fn run(self) -> Result<NodeOutcome, NodeError> {
        let (model_conn, _) = self.listeners.model.accept()?;
        let (weights_conn, _) = self.listeners.weights.accept()?;
        let configured = receive_config(model_conn, weights_conn, &self.options, &self.phase)?;
        let (upstream, peer) = self.listeners.data.accept()?;
        debug!("node {}: upstream connected from {peer}", configured.envelope.index);
        relay_loop(configured, upstream, &self.options, &self.phase)
    }
}

fn expect_frame(
    reader: &mut FrameReader<BufReader<TcpStream>>,
    kind: MessageKind,
    expected: &'static str,
) -> Result<Message, NodeError> {
    match reader.recv()? {
        Some(m) if m.kind == kind => Ok(m),
        Some(m) => Err(NodeError::Protocol { expected, got: m.kind }),
        None => Err(NodeError::ConfigAborted),
    }
}

/// Reads the partition and next hop, validates them, opens the downstream
/// connection and acknowledges. Arrival order of the two connections'
/// messages does not matter.
pub fn receive_config(
    model_conn: TcpStream,
    weights_conn: TcpStream,
    options: &NodeOptions,
    phase: &PhaseCell,
) -> Result<Configured, NodeError> {
    let weights_thread = thread::spawn(move || -> Result<WeightMap, NodeError> {
        let mut r = FrameReader::new(BufReader::new(weights_conn));
        let m = expect_frame(&mut r, MessageKind::Weights, "Weights")?;
        Ok(messages::decode_weights(&m.payload)?)
    });

    let mut model_tx = model_conn.try_clone()?;
    let mut model_rx = FrameReader::new(BufReader::new(model_conn));
    let reject = |tx: &mut TcpStream, reason: &str| {
        let msg = Message::new(MessageKind::Reject, 0, reason.as_bytes().to_vec());
        if let Err(e) = write_frame(tx, &msg, options.chunk) {
            warn!("could not send Reject: {e}");
        }
    };

    let arch = expect_frame(&mut model_rx, MessageKind::Architecture, "Architecture")
        .and_then(|m| Ok(messages::decode_architecture(&m.payload)?));
    let next_hop = expect_frame(&mut model_rx, MessageKind::NextHop, "NextHop").and_then(|m| Ok(m.next_hop_addr()?));
    let weights = weights_thread
        .join()
        .unwrap_or_else(|_| Err(NodeError::ConfigRejected("weights reader panicked".into())));

    let built = (|| {
        let envelope = arch?;
        let next_hop = next_hop?;
        let graph = ModelGraph::from_architecture(envelope.architecture.clone(), weights?)
            .map_err(|e| NodeError::ConfigRejected(e.to_string()))?;
        Ok::<_, NodeError>((envelope, next_hop, graph))
    })();
    let (envelope, next_hop, graph) = match built {
        Ok(v) => v,
        Err(e) => {
            reject(&mut model_tx, &e.to_string());
            return Err(match e {
                NodeError::ConfigRejected(_) => e,
                other => NodeError::ConfigRejected(other.to_string()),
            });
        }
    };

    let downstream = match FrameWriter::connect(next_hop, options.chunk) {
        Ok(w) => w,
        Err(source) => {
            reject(&mut model_tx, &format!("next hop {next_hop} unreachable: {source}"));
            return Err(NodeError::NextHopUnreachable { addr: next_hop, source });
        }
    };
    write_frame(&mut model_tx, &Message::new(MessageKind::Ack, 0, vec![]), options.chunk)?;
    model_tx.flush()?;
    phase.advance(Phase::Ready)?;
    info!(
        "node {}/{} ready: {} layer(s), next hop {next_hop}",
        envelope.index,
        envelope.chain_len,
        graph.compute_layer_count()
    );
    Ok(Configured {
        envelope,
        graph,
        next_hop,
        downstream,
    })
}

enum Item {
    Data(Message, Instant),
    Shutdown(Vec<u8>),
    Closed,
    Failed(String),
}

fn reader_stage(upstream: TcpStream, tx: SyncSender<Item>) {
    let mut reader = FrameReader::new(BufReader::new(upstream));
    loop {
        let item = match reader.recv() {
            Ok(Some(m)) if m.kind == MessageKind::InferenceData => Item::Data(m, Instant::now()),
            Ok(Some(m)) if m.kind == MessageKind::Shutdown => Item::Shutdown(m.payload),
            Ok(Some(m)) => Item::Failed(format!("unexpected {:?} on data connection", m.kind)),
            Ok(None) => Item::Closed,
            Err(e) => Item::Failed(e.to_string()),
        };
        let last = !matches!(item, Item::Data(..));
        if tx.send(item).is_err() || last {
            return;
        }
    }
}

fn decode_input(msg: &Message) -> Result<(crate::tensor::Tensor, CodecSpec), NodeError> {
    let blob = EncodedBlob::from_bytes(&msg.payload).map_err(|e| NodeError::Decode(e.to_string()))?;
    let spec = CodecSpec::from_id(blob.codec_id).map_err(|e| NodeError::Decode(e.to_string()))?;
    let t = codec::decode(&blob).map_err(|e| NodeError::Decode(e.to_string()))?;
    Ok((t, spec))
}

/// Runs the reader and inference stages until Shutdown or failure.
///
/// Each output is re-encoded with the codec of its input and forwarded with
/// the input's sequence number.
pub fn relay_loop(
    cfg: Configured,
    upstream: TcpStream,
    options: &NodeOptions,
    phase: &PhaseCell,
) -> Result<NodeOutcome, NodeError> {
    let Configured {
        envelope,
        graph,
        mut downstream,
        ..
    } = cfg;
    let index = envelope.index;
    let out_kind = if envelope.is_last() {
        MessageKind::Result
    } else {
        MessageKind::InferenceData
    };
    let layers = graph.compute_layer_count();
    let base_delay = options.delay_per_layer * layers as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));

    let upstream_ctl = upstream.try_clone()?;
    let (tx, rx): (SyncSender<Item>, Receiver<Item>) = mpsc::sync_channel(options.queue_depth.max(1));
    let reader = thread::spawn(move || reader_stage(upstream, tx));
    phase.advance(Phase::Running)?;

    let t0 = Instant::now();
    let mut report = NodeReport {
        index: index as u32,
        layers: layers as u32,
        ..Default::default()
    };
    let mut trace = Vec::new();
    let mut forwarded = Vec::new();

    let abort =
        |reason: String, report: &mut NodeReport, downstream: &mut FrameWriter<TcpStream>, upstream_ctl: &TcpStream| {
            warn!("node {index}: aborting chain: {reason}");
            report.sent_bytes = downstream.count_payload();
            report.aborted = Some(reason);
            let mut payload = Vec::new();
            append_report(&mut payload, report);
            let _ = downstream.send(&Message::new(MessageKind::Shutdown, 0, payload));
            let mut up = upstream_ctl;
            let _ = write_frame(&mut up, &Message::new(MessageKind::Shutdown, 0, vec![]), options.chunk);
            let _ = upstream_ctl.shutdown(Shutdown::Both);
        };

    let result = loop {
        let Ok(item) = rx.recv() else {
            break Err(NodeError::UpstreamClosed);
        };
        match item {
            Item::Data(msg, received) => {
                let started = Instant::now();
                let (input, spec) = match decode_input(&msg) {
                    Ok(v) => v,
                    Err(e) => {
                        abort(e.to_string(), &mut report, &mut downstream, &upstream_ctl);
                        break Err(e);
                    }
                };
                let output = match run_model_with(options.exec, &graph, &input) {
                    Ok(y) => y,
                    Err(e) => {
                        abort(e.to_string(), &mut report, &mut downstream, &upstream_ctl);
                        break Err(e.into());
                    }
                };
                let mut delay = base_delay;
                if !options.jitter.is_zero() {
                    delay += options.jitter.mul_f64(rng.random::<f64>());
                }
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                report.compute += started.elapsed();

                let (blob, enc) = codec::timed_encode(&spec, &output);
                report.overhead += enc;
                if let Err(e) = downstream.send(&Message::new(out_kind, msg.sequence, blob.to_bytes())) {
                    break Err(e.into());
                }
                report.cycles += 1;
                forwarded.push(msg.sequence);
                if options.trace {
                    trace.push(TraceEvent {
                        sequence: msg.sequence,
                        received: received - t0,
                        started: started - t0,
                        finished: t0.elapsed(),
                    });
                }
            }
            Item::Shutdown(mut payload) => {
                report.sent_bytes = downstream.count_payload();
                append_report(&mut payload, &report);
                let sent = downstream.send(&Message::new(MessageKind::Shutdown, 0, payload));
                phase.advance(Phase::Stopped)?;
                drop(downstream);
                info!("node {index}: stopped after {} cycle(s)", report.cycles);
                break sent.map(|_| ()).map_err(NodeError::from);
            }
            Item::Closed => {
                abort("upstream closed".into(), &mut report, &mut downstream, &upstream_ctl);
                break Err(NodeError::UpstreamClosed);
            }
            Item::Failed(reason) => {
                abort(reason.clone(), &mut report, &mut downstream, &upstream_ctl);
                break Err(NodeError::Decode(reason));
            }
        }
    };
    drop(rx);
    let _ = upstream_ctl.shutdown(Shutdown::Read);
    let _ = reader.join();
    result.map(|()| NodeOutcome {
        report,
        trace,
        forwarded,
    })
}

/// Binds ephemeral loopback ports and runs a node on a background thread.
pub fn spawn_local(
    options: NodeOptions,
) -> std::io::Result<(
    crate::dispatcher::NodeAddress,
    thread::JoinHandle<Result<NodeOutcome, NodeError>>,
)> {
    let listeners = NodeListeners::bind("127.0.0.1", 0, 0, 0)?;
    let (m, w, d) = listeners.ports()?;
    let addr = crate::dispatcher::NodeAddress::new("127.0.0.1", m, w, d);
    let node = ComputeNode::new(listeners, options);
    let handle = thread::Builder::new()
        .name(format!("node-{d}"))
        .spawn(move || node.run())?;
    Ok((addr, handle))
}
