//! Compares the rayon-parallel kernels against the forced-sequential
//! fallback on the two hot paths: convolution and a small generator
//! forward pass. With the `parallel` feature disabled both measurements
//! collapse to the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lapsegan::dsc::NoiseMode;
use lapsegan::generator::{sample_latents, Generator, GeneratorConfig};
use lapsegan::graph::Graph;
use lapsegan::kernels;
use lapsegan::nn::{self, ParamBind};
use lapsegan::par;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = nn::randn::<f64, _>(&mut rng, &[4, 32, 32, 32], 1.0)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let w = nn::randn::<f64, _>(&mut rng, &[32, 32, 3, 3], 1.0)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let mut group = c.benchmark_group("conv2d_32ch_32x32");
    for (label, force) in [("parallel", false), ("sequential", true)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &force, |b, &force| {
            par::force_sequential(force);
            b.iter(|| kernels::conv2d(&x.view(), &w.view()));
            par::force_sequential(false);
        });
    }
    group.finish();
}

fn bench_generator_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cfg = GeneratorConfig::tiny(3, 16);
    cfg.base_resolution = 8;
    let gen = Generator::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let z = sample_latents::<f64, _>(&mut rng, 4, cfg.latent_dim);
    let mut group = c.benchmark_group("generator_tiny_32x32");
    for (label, force) in [("parallel", false), ("sequential", true)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &force, |b, &force| {
            par::force_sequential(force);
            b.iter(|| {
                let mut g = Graph::<f64>::new();
                let mut bind = ParamBind::frozen();
                let zv = g.constant(z.clone());
                let w = gen.map_latent(&mut g, &mut bind, zv).unwrap();
                gen.synthesize(&mut g, &mut bind, w, &mut NoiseMode::Zero).unwrap()
            });
            par::force_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv2d, bench_generator_forward);
criterion_main!(benches);
