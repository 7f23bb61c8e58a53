use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evicon_core::curation::{curate, CurationConfig};
use evicon_core::embedding::{map_at_k, EmbeddingConfig, EmbeddingModel};
use evicon_core::icon::rasterize;
use evicon_core::par;
use evicon_core::syngen::{default_prototypes, generate_icons};
use evicon_core::{GrayscaleImage, VectorIcon};
use std::hint::black_box;

fn corpus() -> Vec<VectorIcon> {
    generate_icons(&default_prototypes(10), 40, 7).unwrap()
}

fn modes(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(&mut f));
    group.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| par::sequential(&mut f)));
    group.finish();
}

fn rasterize_corpus(c: &mut Criterion) {
    let icons = corpus();
    modes(c, "rasterize", || {
        black_box(par::map(&icons, |i| rasterize(i, 32).unwrap()));
    });
}

fn encode_and_retrieve(c: &mut Criterion) {
    let icons = corpus();
    let images: Vec<GrayscaleImage> = icons.iter().map(|i| rasterize(i, 32).unwrap()).collect();
    let tags: Vec<Vec<String>> = icons.iter().map(|i| i.tags().to_vec()).collect();
    let model = EmbeddingModel::new(&EmbeddingConfig::default()).unwrap();
    modes(c, "encode_images", || {
        black_box(model.encode_images(&images).unwrap());
    });
    let embs = model.encode_images(&images).unwrap();
    modes(c, "map_at_5", || {
        black_box(map_at_k(&embs, &tags, 5).unwrap());
    });
}

fn curation(c: &mut Criterion) {
    let icons = corpus();
    let config = CurationConfig::default();
    modes(c, "curate", || {
        black_box(curate(&icons, &config).unwrap());
    });
}

criterion_group!(benches, rasterize_corpus, encode_and_retrieve, curation);
criterion_main!(benches);
