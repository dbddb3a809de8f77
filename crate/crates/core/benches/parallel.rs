//! Sequential vs rayon execution of the data-parallel hot paths: image
//! encoding in chunks, and resampling in the statistics module.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use me_lab::model::{embed_images, ModelConfig, ModelParams};
use me_lab::parallel::Execution;
use me_lab::stats::{cluster_bootstrap, ClusterKey, ClusteredOutcomes};
use me_lab::synthgen::ImageSample;

fn images(cfg: &ModelConfig, n: usize) -> Vec<ImageSample> {
    let s = cfg.image_size;
    (0..n)
        .map(|k| ImageSample {
            id: format!("i{k}"),
            class: "c".into(),
            pixels: (0..3 * s * s).map(|p| ((p * 31 + k * 7) % 97) as f64 / 97.0 - 0.5).collect(),
            size: s,
            source_bucket: 0,
            is_isolated: true,
        })
        .collect()
}

fn bench_embed(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::random(cfg, 1).expect("valid config");
    let imgs = images(&cfg, 128);
    let refs: Vec<&ImageSample> = imgs.iter().collect();
    let mut group = c.benchmark_group("embed_images_128");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| embed_images(black_box(&params), black_box(&refs), exec).expect("embeds"))
        });
    }
    group.finish();
}

fn bench_bootstrap(c: &mut Criterion) {
    let mut data = ClusteredOutcomes::default();
    for k in 0..6000 {
        data.push(k % 3 != 0, format!("e{}", k / 6), format!("q{k}"), format!("p{}", k % 40));
    }
    let mut group = c.benchmark_group("cluster_bootstrap_2000");
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| cluster_bootstrap(black_box(&data), ClusterKey::Episode, 2000, 0.95, 3, exec).expect("ci"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_embed, bench_bootstrap);
criterion_main!(benches);
