//! Dispatcher and compute-node behaviour over loopback TCP.

use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use defer::bench::{input_tensor, ModelSpec};
use defer::dispatcher::{configure, ChainConfig, DispatchError, NodeAddress};
use defer::messages::{self, ArchEnvelope};
use defer::model::{run_model, LayerKind, LayerSpec, ModelGraph, WeightMap};
use defer::node::{
    receive_config, spawn_local, ComputeNode, NodeListeners, NodeOptions, NodeOutcome, Phase, PhaseCell,
};
use defer::partition::{auto_cuts, partition_model};
use defer::wire::{ChunkConfig, FrameReader, FrameWriter, Message, MessageKind};
use defer::{CodecSpec, Tensor};

type NodeHandle = std::thread::JoinHandle<Result<NodeOutcome, defer::node::NodeError>>;

fn spawn_nodes(k: usize, opts: impl Fn(usize) -> NodeOptions) -> (Vec<NodeAddress>, Vec<NodeHandle>) {
    (0..k).map(|i| spawn_local(opts(i)).unwrap()).unzip()
}

fn join_all(handles: Vec<NodeHandle>) -> Vec<NodeOutcome> {
    handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect()
}

#[test]
fn three_node_chain_is_bit_exact() {
    let g = ModelSpec::chain(9, 16).build(3).unwrap();
    let (addrs, handles) = spawn_nodes(3, |_| NodeOptions::default());
    let mut chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
    assert_eq!(chain.len(), 3);
    let inputs: Vec<Tensor> = (0..10).map(|i| input_tensor(g.input_shape(), 5, i)).collect();
    let outs = chain.infer_stream(inputs.clone()).unwrap();
    assert_eq!(outs.len(), 10);
    for (x, y) in inputs.iter().zip(&outs) {
        assert!(run_model(&g, x).unwrap().bit_eq(y));
    }
    let empty = chain.infer_stream(Vec::new()).unwrap();
    assert!(empty.is_empty());
    let report = chain.shutdown().unwrap();
    assert_eq!(report.nodes.len(), 3);
    assert!(report.nodes.iter().all(|n| n.cycles == 10 && n.layers == 3));
    let outcomes = join_all(handles);
    for o in &outcomes {
        assert_eq!(o.forwarded, (1..=10).collect::<Vec<u64>>());
    }
}

#[test]
fn single_node_chain_sends_results_to_dispatcher() {
    let g = ModelSpec::chain(4, 8).build(1).unwrap();
    let (addrs, handles) = spawn_nodes(1, |_| NodeOptions::default());
    let mut chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
    assert_eq!(chain.partitions()[0].layer_ids.len(), 4);
    let x = input_tensor(g.input_shape(), 1, 0);
    let y = chain.infer_stream([x.clone()]).unwrap();
    assert!(run_model(&g, &x).unwrap().bit_eq(&y[0]));
    chain.shutdown().unwrap();
    join_all(handles);
}

#[test]
fn four_nodes_on_twelve_layers_get_three_each() {
    let g = ModelSpec::chain(12, 8).build(2).unwrap();
    let expected: Vec<usize> = partition_model(&g, &auto_cuts(&g, 4).unwrap())
        .unwrap()
        .iter()
        .map(|p| p.layer_count())
        .collect();
    assert_eq!(expected, vec![3, 3, 3, 3]);
    let (addrs, handles) = spawn_nodes(4, |_| NodeOptions::default());
    let chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
    let got: Vec<usize> = chain.partitions().iter().map(|p| p.layer_ids.len()).collect();
    assert_eq!(got, expected);
    let report = chain.shutdown().unwrap();
    let layers: Vec<usize> = report.nodes.iter().map(|n| n.layers as usize).collect();
    assert_eq!(layers, expected);
    join_all(handles);
}

#[test]
fn unreachable_node_is_reported_and_earlier_nodes_stop() {
    let g = ModelSpec::chain(6, 4).build(0).unwrap();
    let (mut addrs, handles) = spawn_nodes(2, |_| NodeOptions::default());
    // a port with nothing listening
    let dead = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = dead.local_addr().unwrap().port();
    drop(dead);
    addrs.push(NodeAddress::new("127.0.0.1", port, port + 1, port + 2));
    match configure(&g, &ChainConfig::new(addrs)) {
        Err(DispatchError::NodeUnreachable { index, .. }) => assert_eq!(index, 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("configured a chain with a dead node"),
    }
    for h in handles {
        assert!(h.join().unwrap().is_err());
    }
}

fn tiny_graph(kernel_rows: usize) -> (Vec<LayerSpec>, WeightMap) {
    let layers = vec![
        LayerSpec::input("in", vec![1, 3]),
        LayerSpec::weighted("fc", LayerKind::Dense { units: 2 }, "in"),
        LayerSpec::op("act", LayerKind::ReLU, &["fc"]),
    ];
    let mut w = WeightMap::new();
    w.insert("fc.kernel".into(), Tensor::zeros(vec![kernel_rows, 2]).unwrap());
    w.insert("fc.bias".into(), Tensor::zeros(vec![2]).unwrap());
    (layers, w)
}

/// Drives one node's configuration by hand. Returns the reply kind and payload.
fn hand_configure(weights_first: bool, kernel_rows: usize) -> (MessageKind, Vec<u8>, Phase) {
    let (layers, weights) = tiny_graph(kernel_rows);
    let env = ArchEnvelope {
        index: 0,
        chain_len: 1,
        architecture: defer::model::Architecture {
            entry: "in".into(),
            exit: "act".into(),
            layers,
        },
    };
    let ml = TcpListener::bind("127.0.0.1:0").unwrap();
    let wl = TcpListener::bind("127.0.0.1:0").unwrap();
    let sink = TcpListener::bind("127.0.0.1:0").unwrap();
    let (ma, wa, sa) = (
        ml.local_addr().unwrap(),
        wl.local_addr().unwrap(),
        sink.local_addr().unwrap(),
    );
    let phase = std::sync::Arc::new(PhaseCell::default());
    let p2 = phase.clone();
    let node = std::thread::spawn(move || {
        let (m, _) = ml.accept().unwrap();
        let (w, _) = wl.accept().unwrap();
        let r = receive_config(m, w, &NodeOptions::default(), &p2).map(|c| c.envelope);
        (r, sink)
    });
    let chunk = ChunkConfig::default();
    let m = TcpStream::connect(ma).unwrap();
    let w = TcpStream::connect(wa).unwrap();
    let mut mw = FrameWriter::new(m.try_clone().unwrap(), chunk);
    let mut ww = FrameWriter::new(w, chunk);
    let (wp, _) = messages::encode_weights(&weights, &CodecSpec::BIN32);
    let arch = Message::new(
        MessageKind::Architecture,
        0,
        messages::encode_architecture(&env, defer::Compression::None),
    );
    let hop = Message::next_hop(&sa.to_string()).unwrap();
    if weights_first {
        ww.send(&Message::new(MessageKind::Weights, 0, wp)).unwrap();
        std::thread::sleep(Duration::from_millis(50));
        mw.send(&arch).unwrap();
        mw.send(&hop).unwrap();
    } else {
        mw.send(&arch).unwrap();
        mw.send(&hop).unwrap();
        std::thread::sleep(Duration::from_millis(50));
        ww.send(&Message::new(MessageKind::Weights, 0, wp)).unwrap();
    }
    let reply = FrameReader::new(BufReader::new(m)).recv().unwrap().unwrap();
    let (res, _sink) = node.join().unwrap();
    if reply.kind == MessageKind::Ack {
        assert_eq!(res.unwrap(), env);
    } else {
        assert!(res.is_err());
    }
    (reply.kind, reply.payload, phase.get())
}

#[test]
fn config_join_is_order_independent() {
    let a = hand_configure(true, 3);
    let b = hand_configure(false, 3);
    assert_eq!(a.0, MessageKind::Ack);
    assert_eq!(a, b);
    assert_eq!(a.2, Phase::Ready);
}

#[test]
fn wrong_kernel_extent_is_rejected_naming_the_layer() {
    let (kind, payload, phase) = hand_configure(false, 4);
    assert_eq!(kind, MessageKind::Reject);
    assert!(String::from_utf8(payload).unwrap().contains("fc"));
    assert_eq!(phase, Phase::AwaitingConfig);
}

#[test]
fn dispatcher_surfaces_config_rejection() {
    // the node rejects because its next hop is unreachable
    let g = ModelSpec::chain(4, 4).build(0).unwrap();
    let (addrs, handles) = spawn_nodes(1, |_| NodeOptions::default());
    let mut cfg = ChainConfig::new(addrs);
    let dead = TcpListener::bind("127.0.0.1:0").unwrap();
    cfg.result_advertise = Some(dead.local_addr().unwrap().to_string());
    drop(dead);
    match configure(&g, &cfg) {
        Err(DispatchError::ConfigRejected { index, reason }) => {
            assert_eq!(index, 0);
            assert!(reason.contains("next hop"), "{reason}");
        }
        other => panic!("expected rejection, got {:?}", other.err()),
    }
    for h in handles {
        assert!(h.join().unwrap().is_err());
    }
}

#[test]
fn results_stay_ordered_under_jitter() {
    let g = ModelSpec::chain(8, 8).build(4).unwrap();
    let (addrs, handles) = spawn_nodes(4, |i| NodeOptions {
        jitter: Duration::from_millis(5),
        seed: 100 + i as u64,
        ..NodeOptions::default()
    });
    let mut chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
    let mut seqs = Vec::new();
    let n = 100;
    chain
        .infer_each((0..n).map(|i| input_tensor(g.input_shape(), 9, i)), |s, _, _| {
            seqs.push(s)
        })
        .unwrap();
    assert_eq!(seqs, (1..=n).collect::<Vec<_>>());
    chain.shutdown().unwrap();
    for o in join_all(handles) {
        assert_eq!(o.forwarded, (1..=n).collect::<Vec<_>>());
    }
}

#[test]
fn pipelined_interval_is_close_to_one_stage() {
    let d = Duration::from_millis(60);
    for k in [2usize, 4] {
        let g = ModelSpec::chain(4 * k, 4).build(0).unwrap();
        let layers_per = g.compute_layer_count() / k;
        let (addrs, handles) = spawn_nodes(k, |_| NodeOptions {
            delay_per_layer: d / layers_per as u32,
            ..NodeOptions::default()
        });
        let mut chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
        let mut arrivals = Vec::new();
        chain
            .infer_each((0..12).map(|i| input_tensor(g.input_shape(), 0, i)), |_, _, at| {
                arrivals.push(at)
            })
            .unwrap();
        chain.shutdown().unwrap();
        join_all(handles);
        // steady state: skip the pipeline fill
        let steady = &arrivals[k + 1..];
        let mean = (steady[steady.len() - 1] - steady[0]) / (steady.len() - 1) as u32;
        assert!(mean < d.mul_f64(1.5), "k={k}: mean interval {mean:?}");
    }
}

#[test]
fn reader_accepts_next_message_during_inference() {
    let g = ModelSpec::chain(2, 4).build(0).unwrap();
    let (addrs, handles) = spawn_nodes(1, |_| NodeOptions {
        delay_per_layer: Duration::from_millis(50),
        trace: true,
        ..NodeOptions::default()
    });
    let mut chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
    chain
        .infer_stream((0..4).map(|i| input_tensor(g.input_shape(), 0, i)))
        .unwrap();
    chain.shutdown().unwrap();
    let o = join_all(handles).pop().unwrap();
    assert_eq!(o.trace.len(), 4);
    // message 2 was received before message 1 finished inference
    assert!(o.trace[1].received < o.trace[0].finished, "{:?}", o.trace);
}

#[test]
fn shutdown_after_queued_messages_forwards_them_first() {
    let g = ModelSpec::chain(2, 4).build(0).unwrap();
    let listeners = NodeListeners::bind("127.0.0.1", 0, 0, 0).unwrap();
    let (m, w, d) = listeners.ports().unwrap();
    let node = std::thread::spawn(move || {
        ComputeNode::new(
            listeners,
            NodeOptions {
                delay_per_layer: Duration::from_millis(30),
                ..NodeOptions::default()
            },
        )
        .run()
    });
    let mut chain = configure(&g, &ChainConfig::new(vec![NodeAddress::new("127.0.0.1", m, w, d)])).unwrap();
    // three inputs in flight, then Shutdown straight behind them
    let outs = chain
        .infer_stream((0..3).map(|i| input_tensor(g.input_shape(), 0, i)))
        .unwrap();
    assert_eq!(outs.len(), 3);
    let report = chain.shutdown().unwrap();
    assert_eq!(report.nodes[0].cycles, 3);
    let o = node.join().unwrap().unwrap();
    assert_eq!(o.forwarded, vec![1, 2, 3]);
}

/// Configures a single-partition node by hand with results going to a
/// listener owned by the test. Returns the result connection.
fn manual_single_node(g: &ModelGraph, m: u16, w: u16) -> TcpStream {
    let results = TcpListener::bind("127.0.0.1:0").unwrap();
    let chunk = ChunkConfig::default();
    let mconn = TcpStream::connect(("127.0.0.1", m)).unwrap();
    let mut mw = FrameWriter::new(mconn.try_clone().unwrap(), chunk);
    let mut ww = FrameWriter::new(TcpStream::connect(("127.0.0.1", w)).unwrap(), chunk);
    let env = ArchEnvelope {
        index: 0,
        chain_len: 1,
        architecture: g.architecture(),
    };
    ww.send(&Message::new(
        MessageKind::Weights,
        0,
        messages::encode_weights(g.weights(), &CodecSpec::BIN32).0,
    ))
    .unwrap();
    mw.send(&Message::new(
        MessageKind::Architecture,
        0,
        messages::encode_architecture(&env, defer::Compression::None),
    ))
    .unwrap();
    mw.send(&Message::next_hop(&results.local_addr().unwrap().to_string()).unwrap())
        .unwrap();
    let ack = FrameReader::new(BufReader::new(mconn)).recv().unwrap().unwrap();
    assert_eq!(ack.kind, MessageKind::Ack);
    results.accept().unwrap().0
}

#[test]
fn shutdown_drains_messages_still_queued_at_the_node() {
    let g = ModelSpec::chain(2, 4).build(0).unwrap();
    let listeners = NodeListeners::bind("127.0.0.1", 0, 0, 0).unwrap();
    let (m, w, d) = listeners.ports().unwrap();
    let node = std::thread::spawn(move || {
        ComputeNode::new(
            listeners,
            NodeOptions {
                delay_per_layer: Duration::from_millis(20),
                ..NodeOptions::default()
            },
        )
        .run()
    });
    let result_conn = manual_single_node(&g, m, w);
    // three frames and a Shutdown written back to back, so all three are
    // queued when the Shutdown is read
    let mut data = TcpStream::connect(("127.0.0.1", d)).unwrap();
    let chunk = ChunkConfig::default();
    let mut buf = Vec::new();
    for seq in 1..=3u64 {
        let x = input_tensor(g.input_shape(), 0, seq);
        let blob = defer::codec::encode(&CodecSpec::BIN32, &x).to_bytes();
        defer::wire::write_frame(&mut buf, &Message::new(MessageKind::InferenceData, seq, blob), chunk).unwrap();
    }
    defer::wire::write_frame(&mut buf, &Message::new(MessageKind::Shutdown, 4, vec![]), chunk).unwrap();
    data.write_all(&buf).unwrap();
    let mut rx = FrameReader::new(BufReader::new(result_conn));
    let mut kinds = Vec::new();
    while let Some(msg) = rx.recv().unwrap() {
        kinds.push((msg.kind, msg.sequence));
    }
    let kinds: Vec<_> = kinds
        .into_iter()
        .map(|(k, s)| if k == MessageKind::Shutdown { (k, 0) } else { (k, s) })
        .collect();
    assert_eq!(
        kinds,
        vec![
            (MessageKind::Result, 1),
            (MessageKind::Result, 2),
            (MessageKind::Result, 3),
            (MessageKind::Shutdown, 0)
        ]
    );
    let o = node.join().unwrap().unwrap();
    assert_eq!(o.report.cycles, 3);
    assert_eq!(o.forwarded, vec![1, 2, 3]);
}

#[test]
fn decode_error_aborts_the_chain() {
    let g = ModelSpec::chain(2, 4).build(0).unwrap();
    let listeners = NodeListeners::bind("127.0.0.1", 0, 0, 0).unwrap();
    let (m, w, d) = listeners.ports().unwrap();
    let node = std::thread::spawn(move || ComputeNode::new(listeners, NodeOptions::default()).run());
    let result_conn = manual_single_node(&g, m, w);
    let mut data = TcpStream::connect(("127.0.0.1", d)).unwrap();
    FrameWriter::new(&mut data, ChunkConfig::default())
        .send(&Message::new(MessageKind::InferenceData, 1, vec![0xFF, 0x00, 0x01]))
        .unwrap();
    let mut rx = FrameReader::new(BufReader::new(result_conn));
    let msg = rx.recv().unwrap().unwrap();
    assert_eq!(msg.kind, MessageKind::Shutdown);
    let reports = messages::parse_shutdown(&msg.payload).unwrap();
    assert!(reports[0].0.aborted.as_deref().unwrap().contains("decode"));
    // Shutdown also goes back upstream
    let back = FrameReader::new(BufReader::new(data)).recv().unwrap().unwrap();
    assert_eq!(back.kind, MessageKind::Shutdown);
    assert!(node.join().unwrap().is_err());
}

#[test]
fn configuration_is_idempotent() {
    let g = ModelSpec::ResnetLike {
        blocks: 2,
        channels: 3,
        spatial: 6,
        classes: 4,
    }
    .build(8)
    .unwrap();
    let run = || {
        let (addrs, handles) = spawn_nodes(3, |_| NodeOptions::default());
        let chain = configure(&g, &ChainConfig::new(addrs)).unwrap();
        let payloads = chain.architecture_payloads().to_vec();
        chain.shutdown().unwrap();
        join_all(handles);
        payloads
    };
    let a = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, run());
}

#[test]
fn model_graph_partitions_are_graphs() {
    // partitions carry only their own weights
    let g = ModelSpec::chain(6, 4).build(0).unwrap();
    let parts = partition_model(&g, &auto_cuts(&g, 3).unwrap()).unwrap();
    let total: usize = parts.iter().map(|p| p.weights().len()).sum();
    assert_eq!(total, g.weights().len());
    let _: &ModelGraph = &parts[0].graph;
}
