use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use labelrefine::evalmetrics::auc_from_scores;
use labelrefine::morphnoise::{close, dilate, erode, open, simulate_noise, NoiseConfig, StructuringElement};
use labelrefine::postproc::{connected_components, otsu_threshold, Connectivity};
use labelrefine::seeding::rng_from_seed;
use labelrefine::tensornet::{build_generator, GeneratorConfig, Tape, Tensor};
use labelrefine::{LabelMap, ProbMap};
use rand::Rng;

fn label(side: usize, density: f64) -> LabelMap {
    let mut rng = rng_from_seed(side as u64);
    LabelMap::from_fn(side, side, |_, _| rng.random::<f64>() < density)
}

fn morphology(c: &mut Criterion) {
    let mut g = c.benchmark_group("morphology");
    for side in [64, 256] {
        let v = label(side, 0.3);
        for se_side in [2, 3] {
            let se = StructuringElement::square(se_side).unwrap();
            let id = format!("{side}px/se{se_side}");
            g.bench_with_input(BenchmarkId::new("erode", &id), &v, |b, v| b.iter(|| erode(black_box(v), &se)));
            g.bench_with_input(BenchmarkId::new("dilate", &id), &v, |b, v| b.iter(|| dilate(black_box(v), &se)));
            g.bench_with_input(BenchmarkId::new("open", &id), &v, |b, v| b.iter(|| open(black_box(v), &se)));
            g.bench_with_input(BenchmarkId::new("close", &id), &v, |b, v| b.iter(|| close(black_box(v), &se)));
        }
        let cfg = NoiseConfig::default();
        g.bench_with_input(BenchmarkId::new("simulate_noise", side), &v, |b, v| {
            b.iter(|| simulate_noise(black_box(v), &cfg).unwrap())
        });
    }
    g.finish();
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn convolution(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (cin, cout, side, k, stride) in [(4, 8, 64, 3, 1), (8, 16, 64, 4, 2), (32, 32, 16, 3, 1)] {
        let x = random_tensor(&[4, cin, side, side], 1);
        let w = random_tensor(&[cout, cin, k, k], 2);
        let bias = random_tensor(&[cout], 3);
        let id = format!("b4_{cin}to{cout}_{side}px_k{k}s{stride}");
        g.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(bias.clone()));
                t.conv2d(xv, wv, bv, stride, 1).unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(&x.clone().with_grad());
                let wv = t.leaf(&w.clone().with_grad());
                let bv = t.leaf(&bias.clone().with_grad());
                let y = t.conv2d(xv, wv, bv, stride, 1).unwrap();
                let l = t.sum(y);
                t.backward(l).unwrap();
            })
        });
    }
    g.finish();

    let gen = build_generator::<f32>(&GeneratorConfig::default()).unwrap();
    let input = random_tensor(&[1, 4, 64, 64], 4);
    c.bench_function("generator_forward_64px", |b| b.iter(|| gen.forward(black_box(&input)).unwrap()));
}

fn postprocessing(c: &mut Criterion) {
    let mut rng = rng_from_seed(9);
    let side = 256;
    let p = ProbMap::new(side, side, (0..side * side).map(|_| rng.random::<f32>()).collect()).unwrap();
    c.bench_function("otsu_256px", |b| b.iter(|| otsu_threshold(black_box(&p), 256).unwrap()));
    let v = label(side, 0.45);
    let mut g = c.benchmark_group("connected_components_256px");
    for conn in [Connectivity::Four, Connectivity::Eight] {
        g.bench_function(format!("{}", u8::from(conn)), |b| b.iter(|| connected_components(black_box(&v), conn)));
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = rng_from_seed(11);
    let n = 256 * 256;
    let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 256.0).floor() / 255.0).collect();
    let positive: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.12).collect();
    c.bench_function("auc_65536", |b| b.iter(|| auc_from_scores(black_box(&scores), &positive).unwrap()));
}

criterion_group!(benches, morphology, convolution, postprocessing, metrics);
criterion_main!(benches);
