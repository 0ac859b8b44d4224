//! Reference forward kernels.
//!
//! Every output element is accumulated with the innermost reduction index
//! ascending, independent of how output elements are distributed over
//! threads, so results are bit-reproducible in both [`Exec`] modes.

use super::graph::layer_output_shape;
use super::{LayerKind, LayerSpec, ModelError, ModelGraph, WeightMap};
use crate::exec::Exec;
use crate::tensor::Tensor;

/// Output elements per parallel task for Dense.
const DENSE_BLOCK: usize = 256;

pub fn forward(layer: &LayerSpec, inputs: &[&Tensor], weights: &WeightMap) -> Result<Tensor, ModelError> {
    forward_with(Exec::default(), layer, inputs, weights)
}

pub fn forward_with(
    exec: Exec,
    layer: &LayerSpec,
    inputs: &[&Tensor],
    weights: &WeightMap,
) -> Result<Tensor, ModelError> {
    let in_shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = layer_output_shape(layer, &in_shapes, weights)?;
    let w = |i: usize| &weights[&layer.weight_refs[i]];
    let data = match &layer.kind {
        LayerKind::Input { .. } => inputs[0].data().to_vec(),
        LayerKind::Dense { units } => dense(exec, inputs[0], w(0), w(1), *units),
        LayerKind::Conv2D { kernel, stride, .. } => conv2d(exec, inputs[0], w(0), w(1), *kernel, *stride, &out_shape),
        LayerKind::ReLU => inputs[0]
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect(),
        LayerKind::MaxPool2D { pool, stride } => max_pool(inputs[0], *pool, *stride, &out_shape),
        LayerKind::GlobalAvgPool => global_avg_pool(inputs[0]),
        LayerKind::Add => inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| a + b)
            .collect(),
        LayerKind::Flatten => inputs[0].data().to_vec(),
    };
    Ok(Tensor::from_parts(out_shape, data))
}

fn dense(exec: Exec, x: &Tensor, kernel: &Tensor, bias: &Tensor, units: usize) -> Vec<f32> {
    let fan_in = x.shape()[1];
    let rows = x.shape()[0];
    let (x, k, b) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![0.0f32; rows * units];
    exec.for_each_chunk(&mut out, DENSE_BLOCK, |ci, chunk| {
        let start = ci * DENSE_BLOCK;
        let end = start + chunk.len();
        let mut e = start;
        while e < end {
            let r = e / units;
            let j0 = e % units;
            let j1 = units.min(j0 + (end - e));
            let acc = &mut chunk[e - start..e - start + (j1 - j0)];
            let xrow = &x[r * fan_in..(r + 1) * fan_in];
            for (i, &xi) in xrow.iter().enumerate() {
                let krow = &k[i * units + j0..i * units + j1];
                for (a, &kij) in acc.iter_mut().zip(krow) {
                    *a += xi * kij;
                }
            }
            for (a, &bj) in acc.iter_mut().zip(&b[j0..j1]) {
                *a += bj;
            }
            e += j1 - j0;
        }
    });
    out
}

/// Leading padding for "same" windows.
fn same_pad_before(input: usize, output: usize, window: usize, stride: usize) -> usize {
    ((output - 1) * stride + window).saturating_sub(input) / 2
}

fn conv2d(
    exec: Exec,
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    ksize: usize,
    stride: usize,
    out_shape: &[usize],
) -> Vec<f32> {
    let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [n, oh, ow, f] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
    let pt = same_pad_before(h, oh, ksize, stride);
    let pl = same_pad_before(w, ow, ksize, stride);
    let (x, k, b) = (x.data(), kernel.data(), bias.data());
    let row_len = ow * f;
    let mut out = vec![0.0f32; n * oh * row_len];
    exec.for_each_chunk(&mut out, row_len, |row, chunk| {
        let (bn, oy) = (row / oh, row % oh);
        for ox in 0..ow {
            let acc = &mut chunk[ox * f..(ox + 1) * f];
            for ky in 0..ksize {
                let Some(iy) = (oy * stride + ky).checked_sub(pt).filter(|&iy| iy < h) else {
                    continue;
                };
                for kx in 0..ksize {
                    let Some(ix) = (ox * stride + kx).checked_sub(pl).filter(|&ix| ix < w) else {
                        continue;
                    };
                    let xbase = ((bn * h + iy) * w + ix) * c;
                    for ci in 0..c {
                        let xv = x[xbase + ci];
                        let kbase = ((ky * ksize + kx) * c + ci) * f;
                        for (a, &kv) in acc.iter_mut().zip(&k[kbase..kbase + f]) {
                            *a += xv * kv;
                        }
                    }
                }
            }
            for (a, &bv) in acc.iter_mut().zip(b) {
                *a += bv;
            }
        }
    });
    out
}

fn max_pool(x: &Tensor, pool: usize, stride: usize, out_shape: &[usize]) -> Vec<f32> {
    let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [n, oh, ow, _] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
    let pt = same_pad_before(h, oh, pool, stride);
    let pl = same_pad_before(w, ow, pool, stride);
    let x = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for bn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best: Option<f32> = None;
                    for py in 0..pool {
                        let Some(iy) = (oy * stride + py).checked_sub(pt).filter(|&iy| iy < h) else {
                            continue;
                        };
                        for px in 0..pool {
                            let Some(ix) = (ox * stride + px).checked_sub(pl).filter(|&ix| ix < w) else {
                                continue;
                            };
                            let v = x[((bn * h + iy) * w + ix) * c + ci];
                            best = Some(match best {
                                Some(m) if m >= v => m,
                                _ => v,
                            });
                        }
                    }
                    out.push(best.expect("same padding keeps each window anchored in bounds"));
                }
            }
        }
    }
    out
}

fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let x = x.data();
    let count = (h * w) as f32;
    let mut out = Vec::with_capacity(n * c);
    for bn in 0..n {
        for ci in 0..c {
            let mut sum = 0.0f32;
            for iy in 0..h {
                for ix in 0..w {
                    sum += x[((bn * h + iy) * w + ix) * c + ci];
                }
            }
            out.push(sum / count);
        }
    }
    out
}

pub fn run_model(graph: &ModelGraph, input: &Tensor) -> Result<Tensor, ModelError> {
    run_model_with(Exec::default(), graph, input)
}

/// Folds [`forward_with`] over the graph's topological order.
pub fn run_model_with(exec: Exec, graph: &ModelGraph, input: &Tensor) -> Result<Tensor, ModelError> {
    let layers = graph.layers();
    let mut uses = vec![0usize; layers.len()];
    for l in layers {
        for i in &l.inputs {
            uses[graph.position(i).expect("validated")] += 1;
        }
    }
    let exit = graph.position(graph.exit()).expect("validated");
    let mut values: Vec<Option<Tensor>> = vec![None; layers.len()];
    for (pos, layer) in layers.iter().enumerate() {
        let out = if let LayerKind::Input { shape } = &layer.kind {
            if input.rank() != shape.len() {
                return Err(ModelError::RankMismatch {
                    expected: shape.len(),
                    got: input.rank(),
                });
            }
            input.clone()
        } else {
            let positions: Vec<usize> = layer
                .inputs
                .iter()
                .map(|i| graph.position(i).expect("validated"))
                .collect();
            let out = {
                let ins: Vec<&Tensor> = positions
                    .iter()
                    .map(|&p| values[p].as_ref().expect("inputs computed before consumers"))
                    .collect();
                forward_with(exec, layer, &ins, graph.weights())?
            };
            for p in positions {
                uses[p] -= 1;
                if uses[p] == 0 && p != exit {
                    values[p] = None;
                }
            }
            out
        };
        values[pos] = Some(out);
    }
    Ok(values[exit].take().expect("exit computed"))
}

/// Evaluates independent inputs, parallel across inputs under [`Exec::Parallel`].
pub fn run_batch(exec: Exec, graph: &ModelGraph, inputs: &[Tensor]) -> Vec<Result<Tensor, ModelError>> {
    exec.map(inputs, |t| run_model_with(exec, graph, t))
}
