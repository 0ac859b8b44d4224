//! Sequential versus data-parallel execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use defer::bench::{input_tensor, ModelSpec, WeightsFixture};
use defer::codec::encode_with;
use defer::model::{forward_with, run_batch, LayerKind, LayerSpec, WeightMap};
use defer::{CodecSpec, Compression, Exec};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn weighted(id: &str, kind: LayerKind, input: &[usize], seed: u64) -> (LayerSpec, WeightMap) {
    let layer = LayerSpec::weighted(id, kind, "x");
    let (k, b) = WeightsFixture::new(seed, 16.0).layer_weights(&layer, input).unwrap();
    let mut w = WeightMap::new();
    w.insert(format!("{id}.kernel"), k);
    w.insert(format!("{id}.bias"), b);
    (layer, w)
}

fn dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("dense");
    for units in [256, 2048] {
        let shape = [8, 1024];
        let (layer, w) = weighted("d", LayerKind::Dense { units }, &shape, 1);
        let x = input_tensor(&shape, 1, 0);
        g.throughput(Throughput::Elements((8 * 1024 * units) as u64));
        for (name, exec) in EXECS {
            g.bench_with_input(BenchmarkId::new(name, units), &units, |b, _| {
                b.iter(|| forward_with(exec, &layer, &[&x], &w).unwrap())
            });
        }
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for hw in [16, 56] {
        let shape = [1, hw, hw, 32];
        let kind = LayerKind::Conv2D {
            filters: 32,
            kernel: 3,
            stride: 1,
        };
        let (layer, w) = weighted("c", kind, &shape, 2);
        let x = input_tensor(&shape, 2, 0);
        for (name, exec) in EXECS {
            g.bench_with_input(BenchmarkId::new(name, hw), &hw, |b, _| {
                b.iter(|| forward_with(exec, &layer, &[&x], &w).unwrap())
            });
        }
    }
    g.finish();
}

fn codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode");
    let t = input_tensor(&[1, 64, 64, 64], 3, 0);
    g.throughput(Throughput::Bytes(t.byte_len() as u64));
    let specs = [
        CodecSpec::TEXT,
        CodecSpec::binary(16, Compression::None).unwrap(),
        CodecSpec::BIN32.with_compression(Compression::Lz),
    ];
    for spec in specs {
        for (name, exec) in EXECS {
            g.bench_with_input(BenchmarkId::new(name, spec), &spec, |b, spec| {
                b.iter(|| encode_with(exec, spec, &t))
            });
        }
    }
    g.finish();
}

fn batch(c: &mut Criterion) {
    let mut g = c.benchmark_group("run_batch");
    g.sample_size(20);
    let model = ModelSpec::ResnetLike {
        blocks: 3,
        channels: 16,
        spatial: 16,
        classes: 10,
    }
    .build(4)
    .unwrap();
    let inputs: Vec<_> = (0..16).map(|i| input_tensor(model.input_shape(), 4, i)).collect();
    g.throughput(Throughput::Elements(inputs.len() as u64));
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| run_batch(exec, &model, &inputs)));
    }
    g.finish();
}

criterion_group!(benches, dense, conv, codec, batch);
criterion_main!(benches);
