//! Dispatcher runtime: partitions the model, configures every compute node,
//! then streams inputs into the chain and collects ordered results.

use std::fmt;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::codec::{self, CodecError, CodecSpec, Compression, EncodedBlob};
use crate::messages::{self, ArchEnvelope, NodeReport, PayloadError};
use crate::metrics::{ClassTotals, MetricsReport, MsgClass, NodeTotals, OverheadMeter};
use crate::model::ModelGraph;
use crate::partition::{auto_cuts, partition_model, CutPoint, Partition, PartitionError};
use crate::tensor::Tensor;
use crate::wire::{ChunkConfig, FrameReader, FrameWriter, Message, MessageKind, WireError};

pub const DEFAULT_WINDOW: usize = 16;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("node {index} unreachable: {reason}")]
    NodeUnreachable { index: usize, reason: String },
    #[error("node {index} rejected its configuration: {reason}")]
    ConfigRejected { index: usize, reason: String },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("chain broken at node {index}: {reason}")]
    ChainBroken { index: usize, reason: String },
    #[error("result sequence {got} arrived where {expected} was expected")]
    OrderViolation { expected: u64, got: u64 },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("invalid node address `{0}`")]
    BadAddress(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `host:model_port:weights_port:data_port`
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeAddress {
    pub host: String,
    pub model_port: u16,
    pub weights_port: u16,
    pub data_port: u16,
}

impl NodeAddress {
    pub fn new(host: impl Into<String>, model_port: u16, weights_port: u16, data_port: u16) -> Self {
        NodeAddress {
            host: host.into(),
            model_port,
            weights_port,
            data_port,
        }
    }

    pub fn data_endpoint(&self) -> String {
        format!("{}:{}", self.host, self.data_port)
    }

    fn resolve(&self, port: u16) -> Option<SocketAddr> {
        (self.host.as_str(), port).to_socket_addrs().ok()?.next()
    }
}

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.host, self.model_port, self.weights_port, self.data_port
        )
    }
}

impl FromStr for NodeAddress {
    type Err = DispatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DispatchError::BadAddress(s.to_string());
        let parts: Vec<&str> = s.trim().rsplitn(4, ':').collect();
        let [dp, wp, mp, host] = parts[..] else {
            return Err(bad());
        };
        let port = |p: &str| p.parse::<u16>().map_err(|_| bad());
        let addr = NodeAddress::new(host, port(mp)?, port(wp)?, port(dp)?);
        let ports = [addr.model_port, addr.weights_port, addr.data_port];
        if host.is_empty() || ports[0] == ports[1] || ports[1] == ports[2] || ports[0] == ports[2] {
            return Err(bad());
        }
        Ok(addr)
    }
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    /// In chain order.
    pub nodes: Vec<NodeAddress>,
    /// Only the compression stage applies; architecture is always text.
    pub arch_codec: CodecSpec,
    pub weights_codec: CodecSpec,
    pub data_codec: CodecSpec,
    pub chunk: ChunkConfig,
    /// Where the dispatcher listens for results.
    pub result_bind: SocketAddr,
    /// Address the last node is told to send results to, when it differs from
    /// the bound address (e.g. behind a relay).
    pub result_advertise: Option<String>,
    /// Maximum inputs in flight.
    pub window: usize,
    /// Explicit cut points; balanced automatic cuts otherwise.
    pub cuts: Option<Vec<CutPoint>>,
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl ChainConfig {
    pub fn new(nodes: Vec<NodeAddress>) -> Self {
        ChainConfig {
            nodes,
            arch_codec: CodecSpec::TEXT,
            weights_codec: CodecSpec::BIN32.with_compression(Compression::Lz),
            data_codec: CodecSpec::BIN32.with_compression(Compression::Lz),
            chunk: ChunkConfig::default(),
            result_bind: "127.0.0.1:0".parse().unwrap(),
            result_advertise: None,
            window: DEFAULT_WINDOW,
            cuts: None,
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(60),
        }
    }
}

/// Dispatcher-side counters for one chain.
#[derive(Clone, Debug, Default)]
pub struct DispatcherTotals {
    pub arch_bytes: u64,
    pub weights_bytes: u64,
    /// Data connection bytes written by the dispatcher, Shutdown included.
    pub data_bytes: u64,
    pub arch_overhead: OverheadMeter,
    pub weights_overhead: OverheadMeter,
    pub data_overhead: OverheadMeter,
}

#[derive(Clone, Debug)]
pub struct PartitionSummary {
    pub index: usize,
    pub layer_ids: Vec<String>,
    pub weight_bytes: usize,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl From<&Partition> for PartitionSummary {
    fn from(p: &Partition) -> Self {
        PartitionSummary {
            index: p.index,
            layer_ids: p.layer_ids().into_iter().map(String::from).collect(),
            weight_bytes: p.graph.weight_bytes(),
            input_shape: p.input_shape().to_vec(),
            output_shape: p.output_shape(),
        }
    }
}

/// Everything known after teardown.
#[derive(Clone, Debug)]
pub struct ChainReport {
    pub dispatcher: DispatcherTotals,
    pub nodes: Vec<NodeReport>,
    /// Shutdown payload length leaving each node.
    pub shutdown_payload_lens: Vec<usize>,
    pub chunk: ChunkConfig,
    pub cycles: u64,
}

impl ChainReport {
    /// Bytes node `i` wrote downstream, its Shutdown frame included.
    pub fn node_sent_bytes(&self, i: usize) -> u64 {
        self.nodes[i].sent_bytes + self.chunk.frame_len(self.shutdown_payload_lens[i])
    }

    /// All data-connection bytes in the forward direction.
    pub fn data_payload_bytes(&self) -> u64 {
        self.dispatcher.data_bytes + (0..self.nodes.len()).map(|i| self.node_sent_bytes(i)).sum::<u64>()
    }

    pub fn data_overhead(&self) -> Duration {
        self.dispatcher.data_overhead.total() + self.nodes.iter().map(|n| n.overhead).sum::<Duration>()
    }

    pub fn metrics(&self, cycles_completed: u64, window_seconds: f64) -> MetricsReport {
        let mut classes = std::collections::BTreeMap::new();
        classes.insert(
            MsgClass::Architecture,
            ClassTotals {
                payload_bytes: self.dispatcher.arch_bytes,
                overhead: self.dispatcher.arch_overhead.total(),
            },
        );
        classes.insert(
            MsgClass::Weights,
            ClassTotals {
                payload_bytes: self.dispatcher.weights_bytes,
                overhead: self.dispatcher.weights_overhead.total(),
            },
        );
        classes.insert(
            MsgClass::Data,
            ClassTotals {
                payload_bytes: self.data_payload_bytes(),
                overhead: self.data_overhead(),
            },
        );
        MetricsReport {
            cycles_completed,
            window_seconds,
            throughput: crate::metrics::throughput(cycles_completed, window_seconds),
            classes,
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeTotals {
                    index: n.index as usize,
                    layers: n.layers as usize,
                    cycles: n.cycles,
                    compute: n.compute,
                    overhead: n.overhead,
                    sent_bytes: self.node_sent_bytes(i),
                })
                .collect(),
        }
    }
}

/// Results of a fixed-window run.
#[derive(Clone, Copy, Debug)]
pub struct WindowStats {
    /// Results fully received before the window closed.
    pub cycles_in_window: u64,
    pub window_seconds: f64,
    pub sent: u64,
    pub received: u64,
}

impl WindowStats {
    pub fn throughput(&self) -> f64 {
        crate::metrics::throughput(self.cycles_in_window, self.window_seconds)
    }
}

pub struct ConfiguredChain {
    partitions: Vec<PartitionSummary>,
    arch_payloads: Vec<Vec<u8>>,
    data_tx: FrameWriter<TcpStream>,
    results: FrameReader<BufReader<TcpStream>>,
    data_codec: CodecSpec,
    window: usize,
    next_seq: u64,
    totals: DispatcherTotals,
    cycles: u64,
    chunk: ChunkConfig,
}

fn connect_with_timeout(addr: &NodeAddress, port: u16, timeout: Duration) -> std::io::Result<TcpStream> {
    let sa = addr.resolve(port).ok_or_else(|| {
        std::io::Error::new(
            std::io::ErrorKind::AddrNotAvailable,
            format!("cannot resolve {}", addr.host),
        )
    })?;
    let s = TcpStream::connect_timeout(&sa, timeout)?;
    s.set_nodelay(true)?;
    Ok(s)
}

fn accept_with_timeout(listener: &TcpListener, timeout: Duration) -> Result<TcpStream, DispatchError> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(DispatchError::Timeout("result connection"));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Sends Shutdown into the first `configured` nodes' data path.
fn teardown(cfg: &ChainConfig, configured: usize) {
    if configured == 0 {
        return;
    }
    match connect_with_timeout(&cfg.nodes[0], cfg.nodes[0].data_port, cfg.connect_timeout) {
        Ok(s) => {
            let mut w = FrameWriter::new(s, cfg.chunk);
            if let Err(e) = w.send(&Message::new(MessageKind::Shutdown, 0, vec![])) {
                warn!("teardown: {e}");
            }
        }
        Err(e) => warn!("teardown: cannot reach node 0: {e}"),
    }
}

/// Partitions `graph` over `cfg.nodes` and configures every node.
pub fn configure(graph: &ModelGraph, cfg: &ChainConfig) -> Result<ConfiguredChain, DispatchError> {
    let listener = TcpListener::bind(cfg.result_bind)?;
    configure_with_listener(graph, cfg, listener)
}

/// As [`configure`], with a pre-bound result listener.
pub fn configure_with_listener(
    graph: &ModelGraph,
    cfg: &ChainConfig,
    listener: TcpListener,
) -> Result<ConfiguredChain, DispatchError> {
    let k = cfg.nodes.len();
    if k == 0 {
        return Err(PartitionError::Unpartitionable { k: 0, available: 0 }.into());
    }
    let cuts = match &cfg.cuts {
        Some(c) => c.clone(),
        None => auto_cuts(graph, k)?,
    };
    let partitions = partition_model(graph, &cuts)?;
    if partitions.len() != k {
        return Err(PartitionError::Unpartitionable {
            k,
            available: partitions.len() - 1,
        }
        .into());
    }
    // open every configuration connection before sending anything
    let mut conns = Vec::with_capacity(k);
    for (index, node) in cfg.nodes.iter().enumerate() {
        let open = |port| {
            connect_with_timeout(node, port, cfg.connect_timeout).map_err(|e| DispatchError::NodeUnreachable {
                index,
                reason: e.to_string(),
            })
        };
        let m = open(node.model_port)?;
        let w = open(node.weights_port)?;
        conns.push((m, w));
    }

    let result_addr = match &cfg.result_advertise {
        Some(a) => a.clone(),
        None => {
            let mut bound = listener.local_addr()?;
            // a wildcard bind is advertised as the interface that reaches the last node
            if bound.ip().is_unspecified() {
                bound.set_ip(conns[k - 1].0.local_addr()?.ip());
            }
            bound.to_string()
        }
    };

    let mut totals = DispatcherTotals::default();
    let mut arch_payloads = Vec::with_capacity(k);
    for (index, ((model_conn, weights_conn), part)) in conns.into_iter().zip(&partitions).enumerate() {
        let res = configure_node(
            index,
            part,
            k,
            cfg,
            model_conn,
            weights_conn,
            &cfg.nodes
                .get(index + 1)
                .map_or(result_addr.clone(), NodeAddress::data_endpoint),
            &mut totals,
        );
        match res {
            Ok(payload) => arch_payloads.push(payload),
            Err(e) => {
                teardown(cfg, index);
                return Err(e);
            }
        }
    }

    let results = match accept_with_timeout(&listener, cfg.io_timeout) {
        Ok(s) => s,
        Err(e) => {
            teardown(cfg, k);
            return Err(e);
        }
    };
    let data = connect_with_timeout(&cfg.nodes[0], cfg.nodes[0].data_port, cfg.connect_timeout).map_err(|e| {
        DispatchError::NodeUnreachable {
            index: 0,
            reason: e.to_string(),
        }
    })?;
    info!("chain of {k} node(s) configured");
    Ok(ConfiguredChain {
        partitions: partitions.iter().map(PartitionSummary::from).collect(),
        arch_payloads,
        data_tx: FrameWriter::new(data, cfg.chunk),
        results: FrameReader::new(BufReader::with_capacity(256 * 1024, results)),
        data_codec: cfg.data_codec,
        window: cfg.window.max(1),
        next_seq: 1,
        totals,
        cycles: 0,
        chunk: cfg.chunk,
    })
}

#[allow(clippy::too_many_arguments)]
fn configure_node(
    index: usize,
    part: &Partition,
    chain_len: usize,
    cfg: &ChainConfig,
    model_conn: TcpStream,
    weights_conn: TcpStream,
    next_hop: &str,
    totals: &mut DispatcherTotals,
) -> Result<Vec<u8>, DispatchError> {
    let broken = |e: WireError| DispatchError::NodeUnreachable {
        index,
        reason: e.to_string(),
    };
    model_conn.set_read_timeout(Some(cfg.io_timeout))?;
    let mut wtx = FrameWriter::new(weights_conn, cfg.chunk);
    let mut mtx = FrameWriter::new(model_conn.try_clone()?, cfg.chunk);

    let (weights_payload, wt) = messages::encode_weights(part.weights(), &cfg.weights_codec);
    totals.weights_overhead.record(wt);
    wtx.send(&Message::new(MessageKind::Weights, 0, weights_payload))
        .map_err(broken)?;

    let envelope = ArchEnvelope {
        index,
        chain_len,
        architecture: part.graph.architecture(),
    };
    let start = Instant::now();
    let arch_payload = messages::encode_architecture(&envelope, cfg.arch_codec.compression);
    totals.arch_overhead.record(start.elapsed());
    mtx.send(&Message::new(MessageKind::Architecture, 0, arch_payload.clone()))
        .map_err(broken)?;
    mtx.send(&Message::next_hop(next_hop)?).map_err(broken)?;

    let mut rx = FrameReader::new(BufReader::new(model_conn));
    let reply = rx.recv().map_err(|e| DispatchError::ConfigRejected {
        index,
        reason: e.to_string(),
    })?;
    totals.arch_bytes += mtx.count_payload();
    totals.weights_bytes += wtx.count_payload();
    match reply {
        Some(m) if m.kind == MessageKind::Ack => {
            debug!("node {index} acknowledged {} layer(s)", part.layer_count());
            Ok(arch_payload)
        }
        Some(m) if m.kind == MessageKind::Reject => Err(DispatchError::ConfigRejected {
            index,
            reason: String::from_utf8_lossy(&m.payload).into_owned(),
        }),
        Some(m) => Err(DispatchError::ConfigRejected {
            index,
            reason: format!("unexpected {:?} reply", m.kind),
        }),
        None => Err(DispatchError::ConfigRejected {
            index,
            reason: "connection closed before acknowledgment".into(),
        }),
    }
}

fn broken_from_shutdown(payload: &[u8], chain_len: usize) -> DispatchError {
    let reports = messages::parse_shutdown(payload).unwrap_or_default();
    match reports.iter().find(|(r, _)| r.aborted.is_some()) {
        Some((r, _)) => DispatchError::ChainBroken {
            index: r.index as usize,
            reason: r.aborted.clone().unwrap_or_default(),
        },
        None => DispatchError::ChainBroken {
            index: chain_len.saturating_sub(1),
            reason: "chain shut down with results outstanding".into(),
        },
    }
}

impl ConfiguredChain {
    pub fn partitions(&self) -> &[PartitionSummary] {
        &self.partitions
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    /// Architecture payloads as sent to each node.
    pub fn architecture_payloads(&self) -> &[Vec<u8>] {
        &self.arch_payloads
    }

    pub fn totals(&self) -> &DispatcherTotals {
        &self.totals
    }

    /// Streams `inputs` through the chain and returns outputs in input order.
    /// Up to `window` inputs are in flight at once.
    pub fn infer_stream<I>(&mut self, inputs: I) -> Result<Vec<Tensor>, DispatchError>
    where
        I: IntoIterator<Item = Tensor>,
    {
        let mut out = Vec::new();
        self.pump(inputs.into_iter(), None, |_, t, _| out.push(t))?;
        Ok(out)
    }

    /// Like [`ConfiguredChain::infer_stream`] but hands each result to `sink`
    /// with its sequence number and arrival time.
    pub fn infer_each<I, F>(&mut self, inputs: I, sink: F) -> Result<u64, DispatchError>
    where
        I: IntoIterator<Item = Tensor>,
        F: FnMut(u64, Tensor, Instant) + Send,
    {
        self.pump(inputs.into_iter(), None, sink).map(|(_, r)| r)
    }

    /// Feeds `input_for(i)` continuously for `window`, counting results that
    /// arrive before it closes. In-flight results are drained afterwards.
    pub fn run_window<F>(&mut self, mut input_for: F, window: Duration) -> Result<WindowStats, DispatchError>
    where
        F: FnMut(u64) -> Tensor,
    {
        let start = Instant::now();
        let deadline = start + window;
        let mut in_window = 0u64;
        let mut i = 0u64;
        let inputs = std::iter::from_fn(|| {
            let t = input_for(i);
            i += 1;
            Some(t)
        });
        let (sent, received) = self.pump(inputs, Some(deadline), |_, _, at| {
            if at <= deadline {
                in_window += 1;
            }
        })?;
        Ok(WindowStats {
            cycles_in_window: in_window,
            window_seconds: window.as_secs_f64(),
            sent,
            received,
        })
    }

    fn pump<I, F>(&mut self, inputs: I, deadline: Option<Instant>, mut sink: F) -> Result<(u64, u64), DispatchError>
    where
        I: Iterator<Item = Tensor>,
        F: FnMut(u64, Tensor, Instant) + Send,
    {
        let chain_len = self.partitions.len();
        let (credit_tx, credit_rx) = mpsc::sync_channel::<u64>(self.window);
        let results = &mut self.results;
        let data_tx = &mut self.data_tx;
        let codec = self.data_codec;
        let next_seq = &mut self.next_seq;
        let data_overhead = &mut self.totals.data_overhead;

        let (sent, recv_result) = thread::scope(|scope| {
            let receiver = scope.spawn(move || -> Result<u64, DispatchError> {
                let mut received = 0u64;
                for expected in credit_rx {
                    let msg = match results.recv()? {
                        Some(m) => m,
                        None => {
                            return Err(DispatchError::ChainBroken {
                                index: chain_len - 1,
                                reason: "result connection closed".into(),
                            })
                        }
                    };
                    match msg.kind {
                        MessageKind::Result if msg.sequence == expected => {}
                        MessageKind::Result => {
                            return Err(DispatchError::OrderViolation {
                                expected,
                                got: msg.sequence,
                            })
                        }
                        MessageKind::Shutdown => return Err(broken_from_shutdown(&msg.payload, chain_len)),
                        other => {
                            return Err(DispatchError::ChainBroken {
                                index: chain_len - 1,
                                reason: format!("unexpected {other:?} on result connection"),
                            })
                        }
                    }
                    let at = Instant::now();
                    let t = codec::decode(&EncodedBlob::from_bytes(&msg.payload)?)?;
                    received += 1;
                    sink(msg.sequence, t, at);
                }
                Ok(received)
            });

            let mut sent = 0u64;
            let mut send_err = None;
            for input in inputs {
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    break;
                }
                let seq = *next_seq;
                let (blob, enc) = codec::timed_encode(&codec, &input);
                data_overhead.record(enc);
                if credit_tx.send(seq).is_err() {
                    break; // receiver failed; its error is reported below
                }
                if let Err(e) = data_tx.send(&Message::new(MessageKind::InferenceData, seq, blob.to_bytes())) {
                    send_err = Some(DispatchError::ChainBroken {
                        index: 0,
                        reason: e.to_string(),
                    });
                    break;
                }
                *next_seq += 1;
                sent += 1;
            }
            drop(credit_tx);
            let r = receiver.join().expect("receiver thread panicked");
            let r = match send_err {
                Some(e) => Err(e),
                None => r,
            };
            (sent, r)
        });
        let received = recv_result?;
        self.cycles += received;
        Ok((sent, received))
    }

    /// Sends Shutdown down the chain and collects every node's report.
    pub fn shutdown(mut self) -> Result<ChainReport, DispatchError> {
        let chain_len = self.partitions.len();
        self.data_tx
            .send(&Message::new(MessageKind::Shutdown, self.next_seq, vec![]))
            .map_err(|e| DispatchError::ChainBroken {
                index: 0,
                reason: e.to_string(),
            })?;
        let payload = match self.results.recv()? {
            Some(m) if m.kind == MessageKind::Shutdown => m.payload,
            Some(m) => {
                return Err(DispatchError::ChainBroken {
                    index: chain_len - 1,
                    reason: format!("unexpected {:?} during teardown", m.kind),
                })
            }
            None => {
                return Err(DispatchError::ChainBroken {
                    index: chain_len - 1,
                    reason: "result connection closed during teardown".into(),
                })
            }
        };
        let parsed = messages::parse_shutdown(&payload)?;
        if let Some((r, _)) = parsed.iter().find(|(r, _)| r.aborted.is_some()) {
            return Err(DispatchError::ChainBroken {
                index: r.index as usize,
                reason: r.aborted.clone().unwrap_or_default(),
            });
        }
        if parsed.len() != chain_len {
            return Err(DispatchError::ChainBroken {
                index: parsed.len(),
                reason: format!("{} of {chain_len} node reports received", parsed.len()),
            });
        }
        self.totals.data_bytes = self.data_tx.count_payload();
        let (nodes, lens): (Vec<_>, Vec<_>) = parsed.into_iter().unzip();
        Ok(ChainReport {
            dispatcher: self.totals,
            nodes,
            shutdown_payload_lens: lens,
            chunk: self.chunk,
            cycles: self.cycles,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_address_parsing() {
        let a: NodeAddress = "10.0.0.2:5000:5001:5002".parse().unwrap();
        assert_eq!(a, NodeAddress::new("10.0.0.2", 5000, 5001, 5002));
        assert_eq!(a.to_string(), "10.0.0.2:5000:5001:5002");
        assert_eq!(a.data_endpoint(), "10.0.0.2:5002");
        assert!("h:1:1:2".parse::<NodeAddress>().is_err());
        assert!("h:1:2".parse::<NodeAddress>().is_err());
        assert!(":1:2:3".parse::<NodeAddress>().is_err());
        assert!("h:1:2:x".parse::<NodeAddress>().is_err());
    }
}
