//! The parallel helpers must not change any result: every training and
//! evaluation path gives bit-identical output with the pool and without it.

use evicon_core::curation::{curate, elbow_k, CurationConfig};
use evicon_core::embedding::{map_at_k, train_embedding, EmbeddingConfig, EmbeddingModel};
use evicon_core::icon::rasterize;
use evicon_core::par;
use evicon_core::predictor::{build_examples, train_predictor, PredictorConfig};
use evicon_core::syngen::{default_prototypes, generate_icons, generate_ratings, RatingGenConfig, RatingOracle};
use evicon_core::{GrayscaleImage, VectorIcon};

fn icons() -> Vec<VectorIcon> {
    generate_icons(&default_prototypes(4), 12, 5).unwrap()
}

fn tiny_embedding() -> EmbeddingConfig {
    EmbeddingConfig {
        dim: 8,
        resolution: 12,
        image_hidden: 16,
        token_dim: 8,
        text_hidden: 8,
        vocab_buckets: 64,
        batch: 8,
        epochs: 3,
        seed: 4,
        ..Default::default()
    }
}

fn pairs(icons: &[VectorIcon], res: usize) -> Vec<(GrayscaleImage, Vec<String>)> {
    icons.iter().map(|i| (rasterize(i, res).unwrap(), i.tags().to_vec())).collect()
}

fn both<R: PartialEq + std::fmt::Debug>(f: impl Fn() -> R) -> R {
    let parallel = f();
    let sequential = par::sequential(&f);
    assert_eq!(parallel, sequential);
    parallel
}

#[test]
fn embedding_training_matches_sequential() {
    let data = pairs(&icons(), 12);
    let (model, report) = both(|| {
        let (m, r) = train_embedding(&data, &tiny_embedding()).unwrap();
        (m.flatten(), r.loss_history)
    });
    assert_eq!(report.len(), 3);
    assert!(model.iter().all(|v| v.is_finite()));
}

#[test]
fn retrieval_matches_sequential() {
    let set = icons();
    let model = EmbeddingModel::new(&tiny_embedding()).unwrap();
    let images: Vec<GrayscaleImage> = pairs(&set, 12).into_iter().map(|(i, _)| i).collect();
    let tags: Vec<Vec<String>> = set.iter().map(|i| i.tags().to_vec()).collect();
    let report = both(|| map_at_k(&model.encode_images(&images).unwrap(), &tags, 5).unwrap());
    assert_eq!(report.queries, set.len());
}

#[test]
fn curation_and_elbow_match_sequential() {
    let set = icons();
    let config = CurationConfig {
        resolution: 12,
        per_cluster: 2,
        ..Default::default()
    };
    both(|| curate(&set, &config).unwrap());
    let features: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i / 7) as f64 * 0.5]).collect();
    both(|| elbow_k(&features, 1, 8, 3).unwrap());
}

#[test]
fn predictor_training_matches_sequential() {
    let prototypes = default_prototypes(4);
    let set = icons();
    let oracle = RatingOracle::new(&prototypes, 0.3, 1);
    let ratings = generate_ratings(&set, &oracle, &RatingGenConfig { workers: 12, seed: 2, ..Default::default() }).unwrap();
    let embedding = EmbeddingModel::new(&tiny_embedding()).unwrap();
    let examples = both(|| build_examples(&embedding, &set, &ratings.records).unwrap());
    let config = PredictorConfig {
        hidden: 16,
        trunk_layers: 2,
        epochs: 2,
        batch: 40,
        seed: 9,
        ..Default::default()
    };
    let (flat, history) = both(|| {
        let (m, r) = train_predictor(&examples, &config).unwrap();
        (m.flatten(), r.loss_history)
    });
    assert_eq!(history.len(), 2);
    assert!(flat.iter().all(|v| v.is_finite()));
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let data = pairs(&icons(), 12);
    let a = train_embedding(&data, &tiny_embedding()).unwrap().0.to_checkpoint();
    let b = train_embedding(&data, &tiny_embedding()).unwrap().0.to_checkpoint();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
