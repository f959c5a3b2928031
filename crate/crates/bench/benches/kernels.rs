use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use cua_core::adapter::{AdapterMode, CuaLayer, Transform};
use cua_core::cayley::{assemble_bdu, cayley_gradient, cayley_transform, skew_from_params, SkewBlockParams};
use cua_core::circuit_plan::{greedy_max_matching, heavy_hex_map};
use cua_core::distill::{build_toy_lm, ToyLmConfig};
use cua_core::entanglement::{haar_bdu, operator_schmidt_bdu, Bipartition};
use cua_core::qemu::{emulate_slice, ChannelParams, EmulationMode};
use cua_core::rng::rng_from;

fn cayley(c: &mut Criterion) {
    let mut g = c.benchmark_group("cayley");
    let mut rng = rng_from(1);
    for b in [4, 16, 64] {
        let p = SkewBlockParams::random(b, 1, 1.0, &mut rng).unwrap();
        let k = skew_from_params(&p, 0).unwrap();
        g.bench_with_input(BenchmarkId::new("transform", b), &k, |bch, k| bch.iter(|| cayley_transform(black_box(k)).unwrap()));
        let up = vec![DMatrix::from_element(b, b, 0.1)];
        g.bench_with_input(BenchmarkId::new("gradient", b), &p, |bch, p| bch.iter(|| cayley_gradient(black_box(p), &up).unwrap()));
    }
    let p = SkewBlockParams::random(4, 256, 1.0, &mut rng).unwrap();
    g.bench_function("assemble_256x4", |bch| bch.iter(|| assemble_bdu(black_box(&p)).unwrap()));
    g.finish();
}

fn adapter(c: &mut Criterion) {
    let mut rng = rng_from(2);
    let d = 128;
    let p = SkewBlockParams::random(4, d / 4, 0.5, &mut rng).unwrap();
    let w = DMatrix::from_fn(d, d, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
    let x = DMatrix::from_fn(64, d, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
    let mut g = c.benchmark_group("adapter");
    for mode in [AdapterMode::SignConstrained, AdapterMode::Orthogonal] {
        let layer = CuaLayer::new(mode, Transform::cayley(p.clone()).unwrap(), w.clone()).unwrap();
        g.bench_function(format!("forward_rows_{mode}"), |bch| bch.iter(|| layer.forward_rows(black_box(&x))));
        let dy = layer.forward_rows(&x);
        g.bench_function(format!("backward_rows_{mode}"), |bch| bch.iter(|| layer.backward_rows(black_box(&x), &dy)));
    }
    g.finish();
}

fn emulation(c: &mut Criterion) {
    let mut rng = rng_from(3);
    let q = assemble_bdu(&SkewBlockParams::random(4, 1, 1.0, &mut rng).unwrap()).unwrap().blocks()[0].clone();
    let x = [0.3, -1.2, 0.8, 0.05];
    let ch = ChannelParams::depolarizing(0.012);
    let mut g = c.benchmark_group("emulate_slice");
    g.bench_function("exact", |bch| bch.iter(|| emulate_slice(&q, black_box(&x), &ch, EmulationMode::ExactProb, 0).unwrap()));
    g.bench_function("sampled_8192", |bch| bch.iter(|| emulate_slice(&q, black_box(&x), &ch, EmulationMode::Sampled, 7).unwrap()));
    g.finish();
}

fn structure(c: &mut Criterion) {
    let u = haar_bdu(1024, 4, 4).unwrap();
    let cut = Bipartition::qubits(10, 12).unwrap();
    c.bench_function("operator_schmidt_bdu_12q", |bch| bch.iter(|| operator_schmidt_bdu(black_box(&u), cut).unwrap()));
    let map = heavy_hex_map(4, 6);
    c.bench_function("greedy_matching_heavy_hex", |bch| bch.iter(|| greedy_max_matching(black_box(&map), usize::MAX)));
}

fn toy_model(c: &mut Criterion) {
    let m = build_toy_lm(ToyLmConfig::default(), 5).unwrap();
    let tokens: Vec<usize> = (0..64).map(|i| 97 + i % 26).collect();
    c.bench_function("toy_lm_logits_64", |bch| bch.iter(|| m.logits(black_box(&tokens)).unwrap()));
}

criterion_group!(benches, cayley, adapter, emulation, structure, toy_model);
criterion_main!(benches);
