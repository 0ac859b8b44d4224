use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{check_shape, Tensor};

pub type WeightMap = BTreeMap<String, Tensor>;

/// Layer kind and its kind-specific parameters.
///
/// Spatial layers use NHWC layout and "same" padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    /// Declared full input shape, batch dimension included.
    Input {
        shape: Vec<usize>,
    },
    /// `[n, f] -> [n, units]`; weights `kernel: [f, units]`, `bias: [units]`.
    Dense {
        units: usize,
    },
    /// `[n, h, w, c] -> [n, ceil(h/s), ceil(w/s), filters]`; weights
    /// `kernel: [k, k, c, filters]`, `bias: [filters]`.
    Conv2D {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    ReLU,
    MaxPool2D {
        pool: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Conv2D { .. } => "Conv2D",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool2D { .. } => "MaxPool2D",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Add => "Add",
            LayerKind::Flatten => "Flatten",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2D { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weight_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn input(id: impl Into<String>, shape: Vec<usize>) -> Self {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::Input { shape },
            weight_refs: vec![],
            inputs: vec![],
        }
    }

    /// A layer without weights fed by `inputs`.
    pub fn op(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            weight_refs: vec![],
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// A Dense or Conv2D layer whose weights are named `<id>.kernel` and `<id>.bias`.
    pub fn weighted(id: impl Into<String>, kind: LayerKind, input: &str) -> Self {
        let id = id.into();
        LayerSpec {
            weight_refs: vec![format!("{id}.kernel"), format!("{id}.bias")],
            inputs: vec![input.to_string()],
            id,
            kind,
        }
    }
}

/// The serializable part of a [`ModelGraph`]: everything except weight values.
///
/// Layers are listed in topological order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub entry: String,
    pub exit: String,
    pub layers: Vec<LayerSpec>,
}

/// A validated layer DAG together with its weights.
///
/// Construction checks every structural invariant and runs shape inference
/// against the declared input shape, so a `ModelGraph` value is always
/// executable.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    /// Topologically sorted.
    layers: Vec<LayerSpec>,
    index: HashMap<String, usize>,
    weights: WeightMap,
    entry: String,
    exit: String,
}

impl ModelGraph {
    pub fn new(
        layers: Vec<LayerSpec>,
        weights: WeightMap,
        entry: impl Into<String>,
        exit: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let entry = entry.into();
        let exit = exit.into();
        validate_structure(&layers, &weights, &entry, &exit)?;

        let order = topo_order(&layers)?;
        let mut by_id: HashMap<String, LayerSpec> = layers.into_iter().map(|l| (l.id.clone(), l)).collect();
        let layers: Vec<LayerSpec> = order
            .iter()
            .map(|id| by_id.remove(id).expect("topo order lists known ids"))
            .collect();
        let index = layers.iter().enumerate().map(|(i, l)| (l.id.clone(), i)).collect();
        let graph = ModelGraph {
            layers,
            index,
            weights,
            entry,
            exit,
        };
        check_connected(&graph)?;
        let declared = graph.input_shape().to_vec();
        infer_shapes(&graph, &declared)?;
        Ok(graph)
    }

    pub fn from_architecture(arch: Architecture, weights: WeightMap) -> Result<Self, ModelError> {
        ModelGraph::new(arch.layers, weights, arch.entry, arch.exit)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            entry: self.entry.clone(),
            exit: self.exit.clone(),
            layers: self.layers.clone(),
        }
    }

    /// Layers in deterministic topological order.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.index.get(id).map(|&i| &self.layers[i])
    }

    /// Position of a layer in [`ModelGraph::layers`].
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn weights(&self) -> &WeightMap {
        &self.weights
    }

    pub fn entry(&self) -> &str {
        &self.entry
    }

    pub fn exit(&self) -> &str {
        &self.exit
    }

    /// Declared shape of the entry Input layer.
    pub fn input_shape(&self) -> &[usize] {
        match &self.layers[self.index[&self.entry]].kind {
            LayerKind::Input { shape } => shape,
            _ => unreachable!("entry is validated to be an Input layer"),
        }
    }

    pub fn topo_order(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.id.as_str()).collect()
    }

    /// Number of non-Input layers.
    pub fn compute_layer_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Edges `(producer, consumer)` as positions, in consumer order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (ci, l) in self.layers.iter().enumerate() {
            for inp in &l.inputs {
                edges.push((self.index[inp], ci));
            }
        }
        edges
    }

    pub fn weight_bytes(&self) -> usize {
        self.weights.values().map(Tensor::byte_len).sum()
    }

    /// Output shape of the exit layer for the declared input.
    pub fn output_shape(&self) -> Vec<usize> {
        let shapes = infer_shapes(self, self.input_shape()).expect("validated at construction");
        shapes[&self.exit].clone()
    }
}

fn validate_structure(layers: &[LayerSpec], weights: &WeightMap, entry: &str, exit: &str) -> Result<(), ModelError> {
    let mut ids = HashSet::new();
    for l in layers {
        if !ids.insert(l.id.as_str()) {
            return Err(ModelError::DuplicateLayer(l.id.clone()));
        }
    }
    let mut inputs_seen = 0;
    let mut referenced = HashSet::new();
    for l in layers {
        if l.inputs.len() != l.kind.arity() {
            return Err(ModelError::Arity {
                layer: l.id.clone(),
                expected: l.kind.arity(),
                got: l.inputs.len(),
            });
        }
        for inp in &l.inputs {
            if !ids.contains(inp.as_str()) {
                return Err(ModelError::UnknownInput {
                    layer: l.id.clone(),
                    input: inp.clone(),
                });
            }
        }
        let want = if l.kind.has_weights() { 2 } else { 0 };
        if l.weight_refs.len() != want {
            return Err(ModelError::BadWeightRefs {
                layer: l.id.clone(),
                reason: format!(
                    "{} takes {want} weight tensors (kernel, bias), got {}",
                    l.kind.name(),
                    l.weight_refs.len()
                ),
            });
        }
        for w in &l.weight_refs {
            if !weights.contains_key(w) {
                return Err(ModelError::MissingWeight {
                    layer: l.id.clone(),
                    weight: w.clone(),
                });
            }
            referenced.insert(w.as_str());
        }
        check_params(l)?;
        if let LayerKind::Input { .. } = l.kind {
            inputs_seen += 1;
            if l.id != entry {
                return Err(ModelError::BadEntry(format!(
                    "Input layer `{}` is not the entry `{entry}`",
                    l.id
                )));
            }
        }
    }
    if inputs_seen != 1 {
        return Err(ModelError::BadEntry(format!("found {inputs_seen} Input layers")));
    }
    if !ids.contains(exit) {
        return Err(ModelError::UnknownLayer(exit.to_string()));
    }
    if let Some(extra) = weights.keys().find(|k| !referenced.contains(k.as_str())) {
        return Err(ModelError::Format(format!(
            "weight `{extra}` is not referenced by any layer"
        )));
    }
    Ok(())
}

fn check_params(l: &LayerSpec) -> Result<(), ModelError> {
    let bad = |reason: &str| {
        Err(ModelError::BadParams {
            layer: l.id.clone(),
            reason: reason.to_string(),
        })
    };
    match &l.kind {
        LayerKind::Input { shape } => {
            if check_shape(shape).is_err() {
                return bad("input shape must have rank >= 1 and positive extents");
            }
        }
        LayerKind::Dense { units } if *units == 0 => return bad("units must be >= 1"),
        LayerKind::Conv2D {
            filters,
            kernel,
            stride,
        } if *filters == 0 || *kernel == 0 || *stride == 0 => return bad("filters, kernel and stride must be >= 1"),
        LayerKind::MaxPool2D { pool, stride } if *pool == 0 || *stride == 0 => {
            return bad("pool and stride must be >= 1")
        }
        _ => {}
    }
    Ok(())
}

/// Every layer must be reachable from the entry and must reach the exit.
fn check_connected(g: &ModelGraph) -> Result<(), ModelError> {
    let n = g.layers.len();
    let mut succ = vec![Vec::new(); n];
    let mut pred = vec![Vec::new(); n];
    for (p, c) in g.edges() {
        succ[p].push(c);
        pred[c].push(p);
    }
    let fwd = reach(g.index[&g.entry], &succ);
    let bwd = reach(g.index[&g.exit], &pred);
    for (i, l) in g.layers.iter().enumerate() {
        if !fwd[i] || !bwd[i] {
            return Err(ModelError::Disconnected(l.id.clone()));
        }
    }
    Ok(())
}

fn reach(start: usize, adj: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// Kahn's algorithm; among ready layers the lexicographically smallest id goes first.
pub fn topo_order(layers: &[LayerSpec]) -> Result<Vec<String>, ModelError> {
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut consumers: HashMap<&str, Vec<&str>> = HashMap::new();
    for l in layers {
        indegree.entry(l.id.as_str()).or_insert(0);
    }
    for l in layers {
        for inp in &l.inputs {
            if !indegree.contains_key(inp.as_str()) {
                return Err(ModelError::UnknownInput {
                    layer: l.id.clone(),
                    input: inp.clone(),
                });
            }
            *indegree.get_mut(l.id.as_str()).unwrap() += 1;
            consumers.entry(inp.as_str()).or_default().push(l.id.as_str());
        }
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(layers.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &c in consumers.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != indegree.len() {
        return Err(ModelError::CycleDetected);
    }
    Ok(order)
}

/// Output shape of one layer given its input shapes, checking weight shapes.
pub(crate) fn layer_output_shape(
    layer: &LayerSpec,
    inputs: &[&[usize]],
    weights: &WeightMap,
) -> Result<Vec<usize>, ModelError> {
    let id = layer.id.as_str();
    if inputs.len() != layer.kind.arity() && !matches!(layer.kind, LayerKind::Input { .. }) {
        return Err(ModelError::Arity {
            layer: id.to_string(),
            expected: layer.kind.arity(),
            got: inputs.len(),
        });
    }
    let weight = |i: usize| -> Result<&Tensor, ModelError> {
        let name = &layer.weight_refs[i];
        weights.get(name).ok_or_else(|| ModelError::MissingWeight {
            layer: id.to_string(),
            weight: name.clone(),
        })
    };
    let expect_weight = |i: usize, want: &[usize]| -> Result<(), ModelError> {
        let w = weight(i)?;
        if w.shape() != want {
            return Err(ModelError::shape(
                id,
                format!(
                    "weight `{}` has shape {:?}, expected {:?}",
                    layer.weight_refs[i],
                    w.shape(),
                    want
                ),
            ));
        }
        Ok(())
    };
    let nhwc = |s: &[usize]| -> Result<[usize; 4], ModelError> {
        match *s {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(ModelError::shape(id, format!("expected rank-4 NHWC input, got {s:?}"))),
        }
    };
    let out = match &layer.kind {
        LayerKind::Input { shape } => {
            let s = inputs.first().copied().unwrap_or(shape);
            if s.len() != shape.len() {
                return Err(ModelError::RankMismatch {
                    expected: shape.len(),
                    got: s.len(),
                });
            }
            s.to_vec()
        }
        LayerKind::Dense { units } => {
            let s = inputs[0];
            let [n, f] = *s else {
                return Err(ModelError::shape(id, format!("Dense expects rank-2 input, got {s:?}")));
            };
            expect_weight(0, &[f, *units])?;
            expect_weight(1, &[*units])?;
            vec![n, *units]
        }
        LayerKind::Conv2D {
            filters,
            kernel,
            stride,
        } => {
            let [n, h, w, c] = nhwc(inputs[0])?;
            expect_weight(0, &[*kernel, *kernel, c, *filters])?;
            expect_weight(1, &[*filters])?;
            vec![n, h.div_ceil(*stride), w.div_ceil(*stride), *filters]
        }
        LayerKind::MaxPool2D { stride, .. } => {
            let [n, h, w, c] = nhwc(inputs[0])?;
            vec![n, h.div_ceil(*stride), w.div_ceil(*stride), c]
        }
        LayerKind::GlobalAvgPool => {
            let [n, _, _, c] = nhwc(inputs[0])?;
            vec![n, c]
        }
        LayerKind::ReLU => inputs[0].to_vec(),
        LayerKind::Add => {
            if inputs[0] != inputs[1] {
                return Err(ModelError::shape(
                    id,
                    format!("Add operands differ: {:?} vs {:?}", inputs[0], inputs[1]),
                ));
            }
            inputs[0].to_vec()
        }
        LayerKind::Flatten => {
            let s = inputs[0];
            vec![s[0], s[1..].iter().product()]
        }
    };
    Ok(out)
}

/// Output shape of every layer for the given input shape.
pub fn infer_shapes(graph: &ModelGraph, input_shape: &[usize]) -> Result<BTreeMap<String, Vec<usize>>, ModelError> {
    check_shape(input_shape)?;
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for layer in graph.layers() {
        let out = if let LayerKind::Input { .. } = layer.kind {
            layer_output_shape(layer, &[input_shape], graph.weights())?
        } else {
            let ins: Vec<&[usize]> = layer.inputs.iter().map(|i| shapes[i].as_slice()).collect();
            layer_output_shape(layer, &ins, graph.weights())?
        };
        shapes.insert(layer.id.clone(), out);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_weights(id: &str, fan_in: usize, units: usize) -> WeightMap {
        let mut w = WeightMap::new();
        w.insert(format!("{id}.kernel"), Tensor::zeros(vec![fan_in, units]).unwrap());
        w.insert(format!("{id}.bias"), Tensor::zeros(vec![units]).unwrap());
        w
    }

    fn diamond() -> Vec<LayerSpec> {
        vec![
            LayerSpec::op("D", LayerKind::Add, &["B", "C"]),
            LayerSpec::op("C", LayerKind::ReLU, &["A"]),
            LayerSpec::op("B", LayerKind::ReLU, &["A"]),
            LayerSpec::input("A", vec![1, 4]),
        ]
    }

    /// All topological orders by brute-force permutation.
    fn all_orders(layers: &[LayerSpec]) -> Vec<Vec<String>> {
        fn rec(layers: &[LayerSpec], placed: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
            if placed.len() == layers.len() {
                out.push(placed.clone());
                return;
            }
            for l in layers {
                if placed.contains(&l.id) {
                    continue;
                }
                if l.inputs.iter().all(|i| placed.contains(i)) {
                    placed.push(l.id.clone());
                    rec(layers, placed, out);
                    placed.pop();
                }
            }
        }
        let mut out = vec![];
        rec(layers, &mut vec![], &mut out);
        out
    }

    #[test]
    fn topo_singleton_and_chain() {
        let single = vec![LayerSpec::input("x", vec![1])];
        assert_eq!(topo_order(&single).unwrap(), vec!["x"]);
        let chain = vec![
            LayerSpec::op("C", LayerKind::ReLU, &["B"]),
            LayerSpec::op("B", LayerKind::ReLU, &["A"]),
            LayerSpec::input("A", vec![1]),
        ];
        assert_eq!(topo_order(&chain).unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn topo_diamond_matches_brute_force_and_tie_break() {
        let layers = diamond();
        let order = topo_order(&layers).unwrap();
        let valid = all_orders(&layers);
        assert_eq!(valid.len(), 2);
        assert!(valid.contains(&order));
        // tie-break picks the lexicographically smallest valid order
        assert_eq!(order, valid.iter().min().unwrap().clone());
        assert_eq!(order, vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn topo_detects_cycle() {
        let layers = vec![
            LayerSpec::input("in", vec![1]),
            LayerSpec::op("a", LayerKind::Add, &["in", "b"]),
            LayerSpec::op("b", LayerKind::ReLU, &["a"]),
        ];
        assert!(matches!(topo_order(&layers), Err(ModelError::CycleDetected)));
        assert!(matches!(
            ModelGraph::new(layers, WeightMap::new(), "in", "b"),
            Err(ModelError::CycleDetected)
        ));
    }

    #[test]
    fn structural_validation() {
        // Add with one input
        let bad = vec![
            LayerSpec::input("in", vec![1, 2]),
            LayerSpec::op("a", LayerKind::Add, &["in"]),
        ];
        assert!(matches!(
            ModelGraph::new(bad, WeightMap::new(), "in", "a"),
            Err(ModelError::Arity {
                expected: 2,
                got: 1,
                ..
            })
        ));
        // dangling branch that never reaches the exit
        let dangling = vec![
            LayerSpec::input("in", vec![1, 2]),
            LayerSpec::op("a", LayerKind::ReLU, &["in"]),
            LayerSpec::op("side", LayerKind::ReLU, &["in"]),
        ];
        assert!(matches!(
            ModelGraph::new(dangling, WeightMap::new(), "in", "a"),
            Err(ModelError::Disconnected(id)) if id == "side"
        ));
        // ReLU carrying weight refs
        let mut relu = LayerSpec::op("r", LayerKind::ReLU, &["in"]);
        relu.weight_refs = vec!["w".into()];
        assert!(matches!(
            ModelGraph::new(
                vec![LayerSpec::input("in", vec![1, 2]), relu],
                WeightMap::new(),
                "in",
                "r"
            ),
            Err(ModelError::BadWeightRefs { .. })
        ));
        // two Input layers
        let two = vec![
            LayerSpec::input("in", vec![1, 2]),
            LayerSpec::input("in2", vec![1, 2]),
            LayerSpec::op("a", LayerKind::Add, &["in", "in2"]),
        ];
        assert!(matches!(
            ModelGraph::new(two, WeightMap::new(), "in", "a"),
            Err(ModelError::BadEntry(_))
        ));
    }

    #[test]
    fn shapes_for_simple_layers() {
        let layers = vec![
            LayerSpec::input("in", vec![1, 8]),
            LayerSpec::op("r", LayerKind::ReLU, &["in"]),
            LayerSpec::weighted("d", LayerKind::Dense { units: 4 }, "r"),
        ];
        let g = ModelGraph::new(layers, dense_weights("d", 8, 4), "in", "d").unwrap();
        let s = infer_shapes(&g, &[1, 8]).unwrap();
        assert_eq!(s["r"], vec![1, 8]);
        assert_eq!(s["d"], vec![1, 4]);
        assert!(matches!(
            infer_shapes(&g, &[1, 8, 1]),
            Err(ModelError::RankMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            infer_shapes(&g, &[1, 7]),
            Err(ModelError::ShapeMismatch { layer, .. }) if layer == "d"
        ));
    }

    /// Output spatial extent of a "same" convolution found by enumerating
    /// the window anchor positions `0, s, 2s, ...` that still start inside the input.
    fn anchors(extent: usize, stride: usize) -> usize {
        (0..extent).filter(|i| i % stride == 0).count()
    }

    #[test]
    fn conv_same_padding_shape_matches_enumeration() {
        let mut w = WeightMap::new();
        w.insert("c.kernel".into(), Tensor::zeros(vec![3, 3, 3, 16]).unwrap());
        w.insert("c.bias".into(), Tensor::zeros(vec![16]).unwrap());
        let layers = vec![
            LayerSpec::input("in", vec![1, 8, 8, 3]),
            LayerSpec::weighted(
                "c",
                LayerKind::Conv2D {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                },
                "in",
            ),
            LayerSpec::op("p", LayerKind::MaxPool2D { pool: 2, stride: 3 }, &["c"]),
            LayerSpec::op("g", LayerKind::GlobalAvgPool, &["p"]),
        ];
        let g = ModelGraph::new(layers, w, "in", "g").unwrap();
        let s = infer_shapes(&g, &[1, 8, 8, 3]).unwrap();
        assert_eq!(s["c"], vec![1, anchors(8, 2), anchors(8, 2), 16]);
        assert_eq!(s["c"], vec![1, 4, 4, 16]);
        assert_eq!(s["p"], vec![1, anchors(4, 3), anchors(4, 3), 16]);
        assert_eq!(s["g"], vec![1, 16]);
    }

    #[test]
    fn weight_shape_mismatch_names_layer() {
        let mut w = dense_weights("d", 8, 4);
        w.insert("d.kernel".into(), Tensor::zeros(vec![8, 5]).unwrap());
        let layers = vec![
            LayerSpec::input("in", vec![1, 8]),
            LayerSpec::weighted("d", LayerKind::Dense { units: 4 }, "in"),
        ];
        let err = ModelGraph::new(layers, w, "in", "d").unwrap_err();
        assert!(matches!(&err, ModelError::ShapeMismatch { layer, .. } if layer == "d"));
        assert!(err.to_string().contains("`d`"));
    }

    #[test]
    fn architecture_serde_roundtrip() {
        let g = ModelGraph::new(diamond(), WeightMap::new(), "A", "D").unwrap();
        let json = serde_json::to_string(&g.architecture()).unwrap();
        let arch: Architecture = serde_json::from_str(&json).unwrap();
        assert_eq!(arch, g.architecture());
        assert_eq!(arch.layers[0].id, "A");
    }
}
