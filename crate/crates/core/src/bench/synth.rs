//! Seeded synthetic models, weights and inputs.
//!
//! Weight values come from a 256-level quantizer: an integer level drawn from
//! a clipped discretized normal, times a power-of-two scale. The result has
//! bounded entropy, so the LZ stage sees realistic redundancy.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::graph::layer_output_shape;
use crate::model::{LayerKind, LayerSpec, ModelError, ModelGraph, WeightMap};
use crate::tensor::Tensor;

pub const LEVELS: i32 = 256;

/// Seeded generator of quantized weight tensors.
#[derive(Clone, Debug)]
pub struct WeightsFixture {
    rng: ChaCha8Rng,
    level_std: f64,
}

impl WeightsFixture {
    /// `level_std` is the standard deviation of the integer level before
    /// clipping to `[-128, 127]`.
    pub fn new(seed: u64, level_std: f64) -> Self {
        WeightsFixture {
            rng: ChaCha8Rng::seed_from_u64(seed),
            level_std,
        }
    }

    pub fn level(&mut self) -> i32 {
        let n = Normal::new(0.0, self.level_std).expect("finite std");
        let v: f64 = n.sample(&mut self.rng);
        (v.round() as i32).clamp(-LEVELS / 2, LEVELS / 2 - 1)
    }

    /// Levels times `2^-scale_exp`.
    pub fn tensor(&mut self, shape: Vec<usize>, scale_exp: i32) -> Tensor {
        let n: usize = shape.iter().product();
        let scale = (2.0f32).powi(-scale_exp);
        let data = (0..n).map(|_| self.level() as f32 * scale).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    /// Kernel and bias for a Dense or Conv2D layer fed a tensor of shape
    /// `input`, scaled so that unit-variance inputs keep roughly unit variance.
    pub fn layer_weights(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<(Tensor, Tensor)> {
        let c = *input.last()?;
        let (kshape, bias_len) = match &layer.kind {
            LayerKind::Dense { units } => (vec![c, *units], *units),
            LayerKind::Conv2D { filters, kernel, .. } => (vec![*kernel, *kernel, c, *filters], *filters),
            _ => return None,
        };
        let fan_in: usize = kshape[..kshape.len() - 1].iter().product();
        let exp = (self.level_std * (fan_in as f64).sqrt()).log2().round() as i32;
        Some((self.tensor(kshape, exp), self.tensor(vec![bias_len], exp + 2)))
    }
}

/// Synthetic model families.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Dense layers of the given widths after an input of `input` features.
    /// A ReLU follows every Dense layer when `relu` is set.
    Chain {
        input: usize,
        sizes: Vec<usize>,
        #[serde(default)]
        relu: bool,
    },
    /// Conv stem, `blocks` residual diamonds, global pooling and a classifier.
    ResnetLike {
        blocks: usize,
        channels: usize,
        spatial: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_classes() -> usize {
    10
}

impl ModelSpec {
    pub fn chain(layers: usize, width: usize) -> Self {
        ModelSpec::Chain {
            input: width,
            sizes: vec![width; layers],
            relu: false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::Chain { sizes, .. } => format!("chain{}", sizes.len()),
            ModelSpec::ResnetLike { blocks, .. } => format!("resnet{blocks}"),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Chain { input, .. } => vec![1, *input],
            ModelSpec::ResnetLike { channels, spatial, .. } => vec![1, *spatial, *spatial, (*channels).min(3)],
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            ModelSpec::Chain { input, sizes, relu } => {
                let mut ls = vec![LayerSpec::input("in", vec![1, *input])];
                let mut prev = "in".to_string();
                for (i, &u) in sizes.iter().enumerate() {
                    let id = format!("d{i}");
                    ls.push(LayerSpec::weighted(&id, LayerKind::Dense { units: u }, &prev));
                    prev = id;
                    if *relu {
                        let r = format!("r{i}");
                        ls.push(LayerSpec::op(&r, LayerKind::ReLU, &[&prev]));
                        prev = r;
                    }
                }
                ls
            }
            ModelSpec::ResnetLike {
                blocks,
                channels,
                classes,
                ..
            } => {
                let conv = |filters, stride| LayerKind::Conv2D {
                    filters,
                    kernel: 3,
                    stride,
                };
                let mut ls = vec![
                    LayerSpec::input("in", self.input_shape()),
                    LayerSpec::weighted("stem", conv(*channels, 1), "in"),
                    LayerSpec::op("stem_relu", LayerKind::ReLU, &["stem"]),
                ];
                let mut prev = "stem_relu".to_string();
                for b in 0..*blocks {
                    let a = format!("b{b}_conv_a");
                    let ar = format!("b{b}_relu_a");
                    let c = format!("b{b}_conv_b");
                    let add = format!("b{b}_add");
                    let out = format!("b{b}_out");
                    ls.push(LayerSpec::weighted(&a, conv(*channels, 1), &prev));
                    ls.push(LayerSpec::op(&ar, LayerKind::ReLU, &[&a]));
                    ls.push(LayerSpec::weighted(&c, conv(*channels, 1), &ar));
                    ls.push(LayerSpec::op(&add, LayerKind::Add, &[&c, &prev]));
                    ls.push(LayerSpec::op(&out, LayerKind::ReLU, &[&add]));
                    prev = out;
                }
                ls.push(LayerSpec::op("pool", LayerKind::GlobalAvgPool, &[&prev]));
                ls.push(LayerSpec::weighted("fc", LayerKind::Dense { units: *classes }, "pool"));
                ls
            }
        }
    }

    pub fn build(&self, seed: u64) -> Result<ModelGraph, ModelError> {
        build_graph(self.layers(), seed)
    }
}

/// Level spread used for model weights.
pub const MODEL_LEVEL_STD: f64 = 16.0;

/// Generates weights for `layers`, which must be listed in topological order
/// with the entry first and the exit last.
pub fn build_graph(layers: Vec<LayerSpec>, seed: u64) -> Result<ModelGraph, ModelError> {
    let entry = layers[0].id.clone();
    let exit = layers.last().unwrap().id.clone();
    let mut fx = WeightsFixture::new(seed, MODEL_LEVEL_STD);
    let mut weights = WeightMap::new();
    let mut shapes: HashMap<&str, Vec<usize>> = HashMap::new();
    for l in &layers {
        let ins: Vec<&[usize]> = match &l.kind {
            LayerKind::Input { shape } => vec![shape.as_slice()],
            _ => l
                .inputs
                .iter()
                .map(|i| {
                    shapes
                        .get(i.as_str())
                        .map(Vec::as_slice)
                        .ok_or_else(|| ModelError::UnknownInput {
                            layer: l.id.clone(),
                            input: i.clone(),
                        })
                })
                .collect::<Result<_, _>>()?,
        };
        if l.kind.has_weights() {
            if let Some((k, b)) = fx.layer_weights(l, ins[0]) {
                weights.insert(l.weight_refs[0].clone(), k);
                weights.insert(l.weight_refs[1].clone(), b);
            }
        }
        let out = layer_output_shape(l, &ins, &weights)?;
        shapes.insert(&l.id, out);
    }
    ModelGraph::new(layers, weights, entry, exit)
}

/// Random input for inference `i` of a run seeded with `seed`: uniform values
/// on a 1/256 grid in `[-1, 1)`.
pub fn input_tensor(shape: &[usize], seed: u64, i: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-256i32..256) as f32 / 256.0).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// A quantized weight set of at least `min_bytes` of f32 data, split into
/// 256×256 tensors (the last may be shorter).
pub fn weights_fixture(seed: u64, min_bytes: usize) -> WeightMap {
    let mut fx = WeightsFixture::new(seed, MODEL_LEVEL_STD);
    let per = 256 * 256;
    let total = min_bytes.div_ceil(4);
    let mut w = WeightMap::new();
    let mut done = 0;
    let mut i = 0;
    while done < total {
        let n = per.min(total - done);
        w.insert(format!("t{i:04}.kernel"), fx.tensor(vec![n], 10));
        done += n;
        i += 1;
    }
    w
}

/// Random small model with at most `max_layers` non-input layers, built from
/// Dense chains and diamond blocks (two branches joined by Add), optionally on
/// a convolutional trunk.
pub fn random_model(seed: u64, max_layers: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = rng.random_bool(0.3);
    let mut ls = Vec::new();
    let mut prev;
    let mut n = 0usize;
    let budget = max_layers.max(3);
    if conv {
        let c = rng.random_range(1..=3);
        let hw = rng.random_range(3..=6);
        ls.push(LayerSpec::input("in", vec![1, hw, hw, c]));
        prev = "in".to_string();
        let filters = rng.random_range(1..=4);
        // convolutional trunk, closed by Flatten or global pooling
        let trunk = rng.random_range(1..=4).min(budget - 2);
        let mut i = 0;
        while n < trunk {
            let id = format!("c{i}");
            let kind = match rng.random_range(0..4) {
                0 => LayerKind::Conv2D {
                    filters,
                    kernel: rng.random_range(1..=3),
                    stride: rng.random_range(1..=2),
                },
                1 => LayerKind::ReLU,
                2 => LayerKind::MaxPool2D {
                    pool: rng.random_range(1..=2),
                    stride: rng.random_range(1..=2),
                },
                _ if budget - n >= 5 => {
                    // conv diamond: two same-shape convs joined by Add
                    let a = format!("c{i}_a");
                    let b = format!("c{i}_b");
                    let k = LayerKind::Conv2D {
                        filters,
                        kernel: 3,
                        stride: 1,
                    };
                    ls.push(LayerSpec::weighted(&a, k.clone(), &prev));
                    ls.push(LayerSpec::weighted(&b, k, &prev));
                    ls.push(LayerSpec::op(&id, LayerKind::Add, &[&a, &b]));
                    n += 3;
                    prev = id;
                    i += 1;
                    continue;
                }
                _ => LayerKind::ReLU,
            };
            if kind.has_weights() {
                ls.push(LayerSpec::weighted(&id, kind, &prev));
            } else {
                ls.push(LayerSpec::op(&id, kind, &[&prev]));
            }
            prev = id;
            n += 1;
            i += 1;
        }
        let close = if rng.random_bool(0.5) {
            LayerKind::Flatten
        } else {
            LayerKind::GlobalAvgPool
        };
        ls.push(LayerSpec::op("flat", close, &[&prev]));
        prev = "flat".to_string();
        n += 1;
    } else {
        let f = rng.random_range(1..=8);
        ls.push(LayerSpec::input("in", vec![rng.random_range(1..=2), f]));
        prev = "in".to_string();
    }

    let mut i = 0;
    let target = rng.random_range(1..=budget.saturating_sub(n).max(1));
    while n < target && n < budget {
        let id = format!("h{i}");
        let width = rng.random_range(1..=8);
        if budget - n >= 4 && rng.random_bool(0.35) {
            // diamond: pre -> {a, b} -> add
            let a = format!("h{i}_a");
            let b = format!("h{i}_b");
            ls.push(LayerSpec::weighted(&a, LayerKind::Dense { units: width }, &prev));
            if rng.random_bool(0.5) {
                ls.push(LayerSpec::op(&b, LayerKind::ReLU, &[&a]));
                ls.push(LayerSpec::op(&id, LayerKind::Add, &[&a, &b]));
            } else {
                ls.push(LayerSpec::weighted(&b, LayerKind::Dense { units: width }, &prev));
                ls.push(LayerSpec::op(&id, LayerKind::Add, &[&a, &b]));
            }
            n += 3;
        } else if rng.random_bool(0.3) && ls.last().is_some_and(|l| l.kind.has_weights()) {
            ls.push(LayerSpec::op(&id, LayerKind::ReLU, &[&prev]));
            n += 1;
        } else {
            ls.push(LayerSpec::weighted(&id, LayerKind::Dense { units: width }, &prev));
            n += 1;
        }
        prev = id;
        i += 1;
    }
    if n == 0 {
        ls.push(LayerSpec::weighted("h0", LayerKind::Dense { units: 2 }, &prev));
    }
    build_graph(ls, seed.wrapping_add(1)).expect("generator emits valid graphs")
}
