//! Splitting a layer graph into sequential sub-networks.
//!
//! A legal cut is a *bridge*: an edge whose removal disconnects the entry from
//! the exit, so exactly one tensor crosses each partition boundary. Because
//! every layer lies on an entry-to-exit path, an edge `u -> v` is a bridge iff
//! in the graph's topological order `v` immediately follows `u` and no other
//! edge spans the boundary between them.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{infer_shapes, run_model, LayerKind, LayerSpec, ModelError, ModelGraph, WeightMap};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid cut {cut}: {reason}")]
    InvalidCut { cut: CutPoint, reason: String },
    #[error("cuts must be distinct and listed in topological order ({0})")]
    CutOrderError(String),
    #[error("cannot split into {k} partitions: only {available} bridge cut(s) available")]
    Unpartitionable { k: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The edge `producer -> consumer` at which a graph is split.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CutPoint {
    pub producer: String,
    pub consumer: String,
}

impl CutPoint {
    pub fn new(producer: impl Into<String>, consumer: impl Into<String>) -> Self {
        CutPoint {
            producer: producer.into(),
            consumer: consumer.into(),
        }
    }
}

impl fmt::Display for CutPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.producer, self.consumer)
    }
}

impl std::str::FromStr for CutPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (p, c) = s
            .split_once("->")
            .ok_or_else(|| format!("expected `producer->consumer`, got `{s}`"))?;
        Ok(CutPoint::new(p.trim(), c.trim()))
    }
}

/// One sub-network of a partitioned graph.
#[derive(Clone, Debug)]
pub struct Partition {
    pub index: usize,
    /// Entry is the original Input (index 0) or a synthetic Input shaped like
    /// the cut tensor. Carries exactly the weights its layers reference.
    pub graph: ModelGraph,
}

impl Partition {
    /// Ids of the non-Input layers, in topological order.
    pub fn layer_ids(&self) -> Vec<&str> {
        self.graph
            .layers()
            .iter()
            .filter(|l| !matches!(l.kind, LayerKind::Input { .. }))
            .map(|l| l.id.as_str())
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        self.graph.compute_layer_count()
    }

    pub fn weights(&self) -> &WeightMap {
        self.graph.weights()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.graph.output_shape()
    }
}

/// Id given to the synthetic Input layer of a partition that starts at `producer`'s output.
pub fn synthetic_input_id(producer: &str) -> String {
    format!("{producer}:in")
}

/// Number of edges spanning each boundary `b` (between positions `b` and `b + 1`).
fn boundary_crossings(graph: &ModelGraph) -> Vec<usize> {
    let n = graph.layers().len();
    let mut delta = vec![0isize; n + 1];
    for (p, c) in graph.edges() {
        delta[p] += 1;
        delta[c] -= 1;
    }
    let mut acc = 0isize;
    delta
        .iter()
        .take(n)
        .map(|d| {
            acc += d;
            acc as usize
        })
        .collect()
}

fn is_bridge_at(graph: &ModelGraph, crossings: &[usize], p: usize, c: usize) -> bool {
    c == p + 1 && crossings[p] == 1 && graph.layers()[c].inputs.contains(&graph.layers()[p].id)
}

/// All usable cut edges in topological order. Edges leaving the entry Input are
/// excluded because they would leave an empty first partition.
pub fn bridges(graph: &ModelGraph) -> Vec<CutPoint> {
    let crossings = boundary_crossings(graph);
    let layers = graph.layers();
    (1..layers.len().saturating_sub(1))
        .filter(|&p| is_bridge_at(graph, &crossings, p, p + 1))
        .map(|p| CutPoint::new(&layers[p].id, &layers[p + 1].id))
        .collect()
}

/// Resolves each cut to the topological position of its producer.
fn cut_positions(graph: &ModelGraph, cuts: &[CutPoint]) -> Result<Vec<usize>, PartitionError> {
    let crossings = boundary_crossings(graph);
    let invalid = |cut: &CutPoint, reason: &str| PartitionError::InvalidCut {
        cut: cut.clone(),
        reason: reason.to_string(),
    };
    let mut positions = Vec::with_capacity(cuts.len());
    for cut in cuts {
        let p = graph
            .position(&cut.producer)
            .ok_or_else(|| invalid(cut, "unknown producer layer"))?;
        let c = graph
            .position(&cut.consumer)
            .ok_or_else(|| invalid(cut, "unknown consumer layer"))?;
        if !graph.layers()[c].inputs.contains(&cut.producer) {
            return Err(invalid(cut, "no such edge"));
        }
        if cut.producer == graph.entry() {
            return Err(invalid(cut, "cutting after the entry leaves an empty partition"));
        }
        if !is_bridge_at(graph, &crossings, p, c) {
            return Err(invalid(
                cut,
                "edge is not a bridge; more than one tensor would cross it",
            ));
        }
        positions.push(p);
    }
    for w in positions.windows(2) {
        if w[0] >= w[1] {
            return Err(PartitionError::CutOrderError(format!(
                "cut after `{}` does not precede cut after `{}`",
                graph.layers()[w[0]].id,
                graph.layers()[w[1]].id
            )));
        }
    }
    Ok(positions)
}

/// Splits `graph` at `cuts`, returning `cuts.len() + 1` partitions.
pub fn partition_model(graph: &ModelGraph, cuts: &[CutPoint]) -> Result<Vec<Partition>, PartitionError> {
    let positions = cut_positions(graph, cuts)?;
    let shapes = infer_shapes(graph, graph.input_shape())?;
    let layers = graph.layers();

    let mut bounds = Vec::with_capacity(positions.len() + 2);
    bounds.push(0usize);
    bounds.extend(positions.iter().map(|p| p + 1));
    bounds.push(layers.len());

    let mut parts = Vec::with_capacity(bounds.len() - 1);
    for (index, seg) in bounds.windows(2).enumerate() {
        let (start, end) = (seg[0], seg[1]);
        let mut sub: Vec<LayerSpec> = Vec::with_capacity(end - start + 1);
        let entry = if index == 0 {
            graph.entry().to_string()
        } else {
            let producer = &layers[start - 1].id;
            let id = synthetic_input_id(producer);
            sub.push(LayerSpec::input(id.clone(), shapes[producer].clone()));
            for l in &layers[start..end] {
                let mut l = l.clone();
                for inp in l.inputs.iter_mut() {
                    if inp == producer {
                        *inp = id.clone();
                    }
                }
                sub.push(l);
            }
            id
        };
        if index == 0 {
            sub.extend_from_slice(&layers[start..end]);
        }
        let weights: WeightMap = sub
            .iter()
            .flat_map(|l| l.weight_refs.iter())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|name| (name.clone(), graph.weights()[name].clone()))
            .collect();
        let exit = layers[end - 1].id.clone();
        parts.push(Partition {
            index,
            graph: ModelGraph::new(sub, weights, entry, exit)?,
        });
    }
    Ok(parts)
}

/// Chooses `k - 1` bridge cuts minimizing the maximum deviation of partition
/// layer counts from the mean. Among optimal choices, earlier partitions take
/// the larger share (lexicographically largest size sequence).
pub fn auto_cuts(graph: &ModelGraph, k: usize) -> Result<Vec<CutPoint>, PartitionError> {
    let available = bridges(graph);
    if k == 0 || available.len() + 1 < k {
        return Err(PartitionError::Unpartitionable {
            k,
            available: available.len(),
        });
    }
    if k == 1 {
        return Ok(vec![]);
    }
    let total = graph.compute_layer_count() as i64;
    let kk = k as i64;
    // boundary prefix counts: 0 = start, then one per candidate cut
    let mut prefix: Vec<i64> = vec![0];
    prefix.extend(
        available
            .iter()
            .map(|c| graph.position(&c.producer).expect("bridge producer exists") as i64),
    );
    let m = prefix.len();
    // scaled deviation of a partition of `size` layers: |k*size - total|
    let dev = |size: i64| (kk * size - total).abs();

    // best[j][r]: optimal max deviation covering prefix[j]..total with r parts
    const NONE: i64 = i64::MAX;
    let mut best = vec![vec![NONE; k + 1]; m];
    for j in 0..m {
        best[j][1] = dev(total - prefix[j]);
    }
    for r in 2..=k {
        for j in (0..m).rev() {
            let mut b = NONE;
            for nj in j + 1..m {
                if best[nj][r - 1] == NONE {
                    continue;
                }
                b = b.min(dev(prefix[nj] - prefix[j]).max(best[nj][r - 1]));
            }
            best[j][r] = b;
        }
    }

    let mut cuts = Vec::with_capacity(k - 1);
    let mut j = 0;
    for r in (2..=k).rev() {
        let target = best[j][r];
        let next = (j + 1..m)
            .rev()
            .find(|&nj| best[nj][r - 1] != NONE && dev(prefix[nj] - prefix[j]).max(best[nj][r - 1]) == target)
            .expect("optimum is attained by some cut");
        cuts.push(available[next - 1].clone());
        j = next;
    }
    Ok(cuts)
}

/// True iff running the partitions in sequence reproduces `run_model(original)`
/// bit-for-bit on `probe`.
pub fn validate_chain(original: &ModelGraph, partitions: &[Partition], probe: &Tensor) -> bool {
    let Ok(expected) = run_model(original, probe) else {
        return false;
    };
    if partitions.is_empty() {
        return false;
    }
    let mut x = probe.clone();
    for p in partitions {
        match run_model(&p.graph, &x) {
            Ok(y) => x = y,
            Err(_) => return false,
        }
    }
    x.bit_eq(&expected)
}
