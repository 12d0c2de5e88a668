//! Sequential vs. data-parallel execution of the batch paths.
//!
//! Without the `parallel` feature both variants run sequentially, which
//! makes the comparison a measure of dispatch overhead only.

use std::hint::black_box;

use cacgen_core::benchmark::{box_palette, box_scenes};
use cacgen_core::diffusion::{DenoiserConfig, Pipeline, SamplerConfig};
use cacgen_core::eval::{evaluate_batch, DetectorConfig};
use cacgen_core::par::Exec;
use cacgen_core::text::Vocabulary;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn pipeline() -> Pipeline {
    let cfg = DenoiserConfig {
        latent_h: 16,
        latent_w: 16,
        ..DenoiserConfig::default()
    };
    Pipeline::new(Vocabulary::toy(), cfg).unwrap()
}

fn sample_batch(c: &mut Criterion) {
    let v = Vocabulary::toy();
    let p = pipeline();
    let scenes = box_scenes(8, 64, 1, &v).unwrap();
    let jobs: Vec<_> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplerConfig {
                steps: 10,
                seed: i as u64,
                exec: Exec::Sequential,
                ..SamplerConfig::default()
            };
            (s.scene.clone(), cfg)
        })
        .collect();
    let mut g = c.benchmark_group("sample_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(p.sample_batch(&jobs, exec)))
        });
    }
    g.finish();
}

/// One image at a time, with the per-layer work split instead.
fn sample_single(c: &mut Criterion) {
    let v = Vocabulary::toy();
    let p = pipeline();
    let scene = box_scenes(1, 64, 2, &v).unwrap().remove(0).scene;
    let mut g = c.benchmark_group("sample_single");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SamplerConfig {
            steps: 10,
            exec,
            ..SamplerConfig::default()
        };
        g.bench_function(name, |b| {
            b.iter(|| black_box(p.sample(&scene, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn evaluate(c: &mut Criterion) {
    let v = Vocabulary::toy();
    let scenes = box_scenes(32, 64, 3, &v).unwrap();
    let palette = box_palette(&v).unwrap();
    let images: Vec<_> = scenes.iter().map(|s| s.reference.clone()).collect();
    let truths: Vec<_> = scenes.iter().map(|s| s.truth.clone()).collect();
    let mut g = c.benchmark_group("evaluate_batch");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                black_box(
                    evaluate_batch(
                        &images,
                        &truths,
                        &images,
                        &palette,
                        DetectorConfig::default(),
                        exec,
                    )
                    .unwrap(),
                )
            })
        });
    }
    g.finish();
}

criterion_group!(benches, sample_batch, sample_single, evaluate);
criterion_main!(benches);
