//! Benchmark harness: synthetic workloads, link shaping and the driver that
//! produces the CSV datasets.
//!
//! Every connection of a benchmark chain runs through a [`link::Proxy`]. Data
//! hops (dispatcher to node 0, node to node, last node back to the
//! dispatcher) are shaped by the plan's link parameters; configuration
//! connections pass through unshaped. The proxies' byte counters are an
//! independent measurement of what the runtimes report.

pub mod link;
pub mod plan;
pub mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use crate::codec::CodecSpec;
use crate::dispatcher::{configure_with_listener, ChainConfig, DispatchError, NodeAddress};
use crate::metrics::{per_node_energy, ClassCodecs, CsvRow, MetricsReport, MsgClass, NodeEnergy};
use crate::model::ModelGraph;
use crate::node::{spawn_local, NodeError, NodeOptions, NodeOutcome};
use crate::partition::PartitionError;
use crate::wire::ChunkConfig;

pub use link::{LinkShape, Proxy, TokenBucket};
pub use plan::{BenchPlan, Mode};
pub use synth::{input_tensor, random_model, weights_fixture, ModelSpec, WeightsFixture};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("cannot bind a port: {0}")]
    PortBindFailure(String),
    #[error("node {node} crashed: {reason}")]
    ChildCrashed { node: usize, reason: String },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("model generation failed: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// Exit status a `defer compute` child uses when it cannot bind its ports.
pub const EXIT_BIND_FAILURE: i32 = 3;

/// Line a `defer compute` child prints once its listeners are bound.
pub fn ready_line(model: u16, weights: u16, data: u16) -> String {
    format!("READY model={model} weights={weights} data={data}")
}

pub fn parse_ready_line(line: &str) -> Option<(u16, u16, u16)> {
    let rest = line.trim().strip_prefix("READY ")?;
    let mut ports = [None; 3];
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        let slot = match k {
            "model" => 0,
            "weights" => 1,
            "data" => 2,
            _ => return None,
        };
        ports[slot] = Some(v.parse().ok()?);
    }
    Some((ports[0]?, ports[1]?, ports[2]?))
}

/// Per-node settings shared by both cluster modes.
#[derive(Clone, Debug)]
pub struct NodeSettings {
    pub delay_per_layer: Duration,
    pub jitter: Duration,
    pub chunk: ChunkConfig,
    pub seed: u64,
}

impl NodeSettings {
    fn options(&self, index: usize) -> NodeOptions {
        NodeOptions {
            delay_per_layer: self.delay_per_layer,
            jitter: self.jitter,
            chunk: self.chunk,
            seed: self.seed.wrapping_add(index as u64),
            ..NodeOptions::default()
        }
    }
}

enum Member {
    Thread(thread::JoinHandle<Result<NodeOutcome, NodeError>>),
    Process(Child),
}

/// A set of running compute nodes.
pub struct Cluster {
    pub addrs: Vec<NodeAddress>,
    members: Vec<Member>,
}

impl Cluster {
    pub fn threads(k: usize, settings: &NodeSettings) -> Result<Cluster, BenchError> {
        let mut addrs = Vec::with_capacity(k);
        let mut members = Vec::with_capacity(k);
        for i in 0..k {
            let (a, h) = spawn_local(settings.options(i)).map_err(|e| BenchError::PortBindFailure(e.to_string()))?;
            addrs.push(a);
            members.push(Member::Thread(h));
        }
        Ok(Cluster { addrs, members })
    }

    /// Spawns `k` `defer compute` processes from `exe`.
    pub fn processes(exe: &Path, k: usize, settings: &NodeSettings) -> Result<Cluster, BenchError> {
        let mut cluster = Cluster {
            addrs: Vec::with_capacity(k),
            members: Vec::with_capacity(k),
        };
        for i in 0..k {
            let o = settings.options(i);
            let mut child = Command::new(exe)
                .args([
                    "compute",
                    "--model-port",
                    "0",
                    "--weights-port",
                    "0",
                    "--data-port",
                    "0",
                ])
                .arg("--delay-per-layer-ms")
                .arg(format!("{}", o.delay_per_layer.as_secs_f64() * 1000.0))
                .arg("--jitter-ms")
                .arg(format!("{}", o.jitter.as_secs_f64() * 1000.0))
                .arg("--seed")
                .arg(o.seed.to_string())
                .arg("--chunk-bytes")
                .arg(o.chunk.chunk_bytes().to_string())
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| BenchError::ChildCrashed {
                    node: i,
                    reason: format!("spawn failed: {e}"),
                })?;
            let stdout = child.stdout.take().expect("piped stdout");
            let (tx, rx) = mpsc::channel();
            // supervisor: forwards the ready line, then keeps draining stdout
            thread::spawn(move || {
                let mut tx = Some(tx);
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if let Some(ports) = parse_ready_line(&line) {
                        if let Some(tx) = tx.take() {
                            let _ = tx.send(ports);
                        }
                    } else {
                        info!("node {i}: {line}");
                    }
                }
            });
            let ready = rx.recv_timeout(Duration::from_secs(30));
            match ready {
                Ok((m, w, d)) => {
                    cluster.addrs.push(NodeAddress::new("127.0.0.1", m, w, d));
                    cluster.members.push(Member::Process(child));
                }
                Err(_) => {
                    // stdout closed or timed out; give an exiting child a moment
                    let give_up = Instant::now() + Duration::from_secs(2);
                    let mut status = None;
                    while status.is_none() && Instant::now() < give_up {
                        status = child.try_wait().ok().flatten();
                        thread::sleep(Duration::from_millis(10));
                    }
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(match status.and_then(|s| s.code()) {
                        Some(EXIT_BIND_FAILURE) => BenchError::PortBindFailure(format!("node {i}")),
                        _ => BenchError::ChildCrashed {
                            node: i,
                            reason: format!("no ready line (status {status:?})"),
                        },
                    });
                }
            }
        }
        Ok(cluster)
    }

    /// Waits for every node to exit; a node that fails or does not exit in
    /// `timeout` is reported as crashed.
    pub fn join(mut self, timeout: Duration) -> Result<(), BenchError> {
        let deadline = Instant::now() + timeout;
        let mut first_err = None;
        for (i, m) in std::mem::take(&mut self.members).into_iter().enumerate() {
            let res = match m {
                Member::Thread(h) => match h.join() {
                    Ok(Ok(_)) => Ok(()),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(_) => Err("panicked".to_string()),
                },
                Member::Process(mut c) => loop {
                    match c.try_wait() {
                        Ok(Some(s)) if s.success() => break Ok(()),
                        Ok(Some(s)) => break Err(format!("exited with {s}")),
                        Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                        Ok(None) => {
                            let _ = c.kill();
                            let _ = c.wait();
                            break Err("did not exit after Shutdown".to_string());
                        }
                        Err(e) => break Err(e.to_string()),
                    }
                },
            };
            if let Err(reason) = res {
                first_err.get_or_insert(BenchError::ChildCrashed { node: i, reason });
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for m in &mut self.members {
            if let Member::Process(c) = m {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

/// Which measurement a chain run performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// A fixed number of inputs; payload counts are deterministic.
    Payload(u64),
    /// Inputs fed continuously for the window.
    Window(Duration),
}

/// One configured chain, measured and torn down.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub nodes: usize,
    pub codec: CodecSpec,
    pub pass: Pass,
    pub metrics: MetricsReport,
    /// Forward bytes counted by the relays, per message class.
    pub transport: BTreeMap<MsgClass, u64>,
    pub node_energy: Vec<NodeEnergy>,
    pub elapsed: Duration,
}

impl RunRecord {
    /// True when every class's reported payload equals the relay count.
    pub fn accounting_matches(&self) -> bool {
        MsgClass::ALL
            .iter()
            .all(|c| self.metrics.payload_bytes(*c) == self.transport.get(c).copied().unwrap_or(0))
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchOutcome {
    pub rows: Vec<CsvRow>,
    pub runs: Vec<RunRecord>,
    /// Node counts the model cannot be split into.
    pub skipped: Vec<(usize, String)>,
}

/// Where compute nodes come from.
#[derive(Clone, Debug)]
pub enum Launcher {
    Threads,
    Processes(PathBuf),
}

impl Launcher {
    /// Process mode needs the `defer` executable.
    pub fn for_plan(plan: &BenchPlan, exe: Option<&Path>) -> Result<Launcher, BenchError> {
        match plan.mode {
            Mode::InProcess => Ok(Launcher::Threads),
            Mode::Process => exe
                .map(|p| Launcher::Processes(p.to_path_buf()))
                .ok_or_else(|| BenchError::Plan("process mode needs the defer executable".into())),
        }
    }

    fn launch(&self, k: usize, settings: &NodeSettings) -> Result<Cluster, BenchError> {
        match self {
            Launcher::Threads => Cluster::threads(k, settings),
            Launcher::Processes(exe) => Cluster::processes(exe, k, settings),
        }
    }
}

/// Benchmarks a prepared chain configuration.
pub struct ChainBench<'a> {
    pub graph: &'a ModelGraph,
    pub launcher: &'a Launcher,
    pub settings: NodeSettings,
    pub link: LinkShape,
    pub in_flight: usize,
    pub input_seed: u64,
    pub energy: crate::metrics::EnergyParams,
}

fn bind_err(e: std::io::Error) -> BenchError {
    BenchError::PortBindFailure(e.to_string())
}

impl ChainBench<'_> {
    /// Launches `k` nodes behind relays, configures them with `codec`, runs
    /// `pass`, tears the chain down and cross-checks the byte counts.
    pub fn run(&self, k: usize, codec: CodecSpec, pass: Pass) -> Result<RunRecord, BenchError> {
        let cluster = self.launcher.launch(k, &self.settings)?;
        let resolve = |port: u16| -> SocketAddr { SocketAddr::from(([127, 0, 0, 1], port)) };
        let mut model_px = Vec::with_capacity(k);
        let mut weights_px = Vec::with_capacity(k);
        let mut data_px = Vec::with_capacity(k + 1);
        let mut nodes = Vec::with_capacity(k);
        for a in &cluster.addrs {
            let m = Proxy::spawn(resolve(a.model_port), LinkShape::default()).map_err(bind_err)?;
            let w = Proxy::spawn(resolve(a.weights_port), LinkShape::default()).map_err(bind_err)?;
            let d = Proxy::spawn(resolve(a.data_port), self.link).map_err(bind_err)?;
            nodes.push(NodeAddress::new(
                "127.0.0.1",
                m.addr().port(),
                w.addr().port(),
                d.addr().port(),
            ));
            model_px.push(m);
            weights_px.push(w);
            data_px.push(d);
        }
        let listener = TcpListener::bind("127.0.0.1:0").map_err(bind_err)?;
        let result_px = Proxy::spawn(listener.local_addr().map_err(bind_err)?, self.link).map_err(bind_err)?;

        let mut cfg = ChainConfig::new(nodes);
        cfg.arch_codec = CodecSpec::TEXT.with_compression(codec.compression);
        cfg.weights_codec = codec;
        cfg.data_codec = codec;
        cfg.chunk = self.settings.chunk;
        cfg.window = self.in_flight;
        cfg.result_advertise = Some(result_px.addr().to_string());

        let start = Instant::now();
        let mut chain = configure_with_listener(self.graph, &cfg, listener)?;
        let shape = self.graph.input_shape().to_vec();
        let seed = self.input_seed;
        let (cycles, window_s) = match pass {
            Pass::Payload(n) => {
                let t0 = Instant::now();
                let got = chain.infer_each((0..n).map(|i| input_tensor(&shape, seed, i)), |_, _, _| {})?;
                (got, t0.elapsed().as_secs_f64())
            }
            Pass::Window(w) => {
                let s = chain.run_window(|i| input_tensor(&shape, seed, i), w)?;
                (s.cycles_in_window, s.window_seconds)
            }
        };
        let report = chain.shutdown()?;
        let elapsed = start.elapsed();
        cluster.join(Duration::from_secs(30))?;

        let mut transport = BTreeMap::new();
        let sum = |px: Vec<Proxy>| px.into_iter().map(|p| p.finish().0).sum::<u64>();
        transport.insert(MsgClass::Architecture, sum(model_px));
        transport.insert(MsgClass::Weights, sum(weights_px));
        data_px.push(result_px);
        transport.insert(MsgClass::Data, sum(data_px));

        let metrics = report.metrics(cycles, window_s);
        let node_energy = per_node_energy(&metrics, &self.energy);
        Ok(RunRecord {
            nodes: k,
            codec,
            pass,
            metrics,
            transport,
            node_energy,
            elapsed,
        })
    }
}

/// Runs every (node count, codec) configuration of `plan`. `exe` is the
/// `defer` binary used in process mode.
pub fn run_bench(plan: &BenchPlan, exe: Option<&Path>) -> Result<BenchOutcome, BenchError> {
    plan.validate()?;
    let launcher = Launcher::for_plan(plan, exe)?;
    let graph = plan.model.build(plan.seed)?;
    let bench = ChainBench {
        graph: &graph,
        launcher: &launcher,
        settings: NodeSettings {
            delay_per_layer: Duration::from_secs_f64(plan.delay_per_layer_ms / 1000.0),
            jitter: Duration::from_secs_f64(plan.jitter_ms / 1000.0),
            chunk: ChunkConfig::new(plan.chunk_bytes).expect("validated"),
            seed: plan.seed,
        },
        link: plan.link,
        in_flight: plan.in_flight,
        input_seed: plan.seed,
        energy: plan.energy,
    };
    let available = crate::partition::bridges(&graph).len() + 1;
    let label = plan.model.label();
    let mut out = BenchOutcome::default();
    for &k in &plan.node_counts {
        if k > available {
            let reason = PartitionError::Unpartitionable {
                k,
                available: available - 1,
            }
            .to_string();
            warn!("skipping {k} node(s): {reason}");
            out.skipped.push((k, reason));
            continue;
        }
        for &codec in &plan.codecs {
            info!("{label}: {k} node(s), {codec}");
            let payload = bench.run(k, codec, Pass::Payload(plan.payload_inputs))?;
            let window = if plan.window_seconds > 0.0 {
                Some(bench.run(k, codec, Pass::Window(Duration::from_secs_f64(plan.window_seconds)))?)
            } else {
                None
            };
            let mut report = payload.metrics.clone();
            if let Some(w) = &window {
                report.throughput = w.metrics.throughput;
            }
            out.rows.extend(CsvRow::from_report(
                &label,
                &ClassCodecs::uniform(codec),
                &report,
                &plan.energy,
            ));
            out.runs.push(payload);
            out.runs.extend(window);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ready_line_roundtrip() {
        assert_eq!(parse_ready_line(&ready_line(1, 2, 3)), Some((1, 2, 3)));
        assert_eq!(parse_ready_line("READY data=3 model=1 weights=2\n"), Some((1, 2, 3)));
        assert_eq!(parse_ready_line("READY model=1 weights=2"), None);
        assert_eq!(parse_ready_line("hello"), None);
    }
}
