//! Offline stages behind the CLI. Every stage reads and writes plain files in
//! one data directory so runs can be resumed or inspected stage by stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use evicon_core::curation::{curate as run_curation, CurationConfig, CurationManifest};
use evicon_core::distinguishability::{argmax_candidates, ScoreWeights};
use evicon_core::embedding::{
    eval_map_at_k, train_embedding as fit_embedding, EmbeddingCheckpoint, EmbeddingConfig, EmbeddingModel, MapReport,
    TrainReport,
};
use evicon_core::icon::{rasterize, read_icons, write_icons};
use evicon_core::predictor::{
    build_examples, eval_precision_recall, train_predictor as fit_predictor, HeadReport, PredictorCheckpoint,
    PredictorConfig, PredictorExample, PredictorModel, PredictorTrainReport,
};
use evicon_core::ratings::{
    read_ratings_csv, split_tags, validate_worker, write_ratings_csv, RatingRecord, Validation, WorkerSubmission,
    LEVELS,
};
use evicon_core::syngen::{default_prototypes, generate_ratings, generate_synthetic_icons, RatingGenConfig, RatingOracle};
use evicon_core::{GrayscaleImage, VectorIcon};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EngineConfig;
use crate::engine::{Engine, ScoreBreakdown};

pub const ICONS: &str = "icons.jsonl";
pub const SUBMISSIONS: &str = "submissions.json";
pub const RATINGS: &str = "ratings.csv";
pub const SPAM: &str = "spam.json";
pub const SPLIT: &str = "split.json";
pub const EMBEDDING: &str = "embedding.json";
pub const PREDICTOR: &str = "predictor.json";
pub const MANIFEST: &str = "manifest.json";

pub const DEFAULT_TEST_FRACTION: f64 = 0.1;
pub const DEFAULT_UNSEEN_TAGS: usize = 1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_icons(path: &Path) -> anyhow::Result<Vec<VectorIcon>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_icons(BufReader::new(file)).with_context(|| format!("reading icons from {}", path.display()))
}

pub fn save_icons(path: &Path, icons: &[VectorIcon]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_icons(&mut w, icons)?;
    w.flush()?;
    Ok(())
}

pub fn load_ratings(path: &Path) -> anyhow::Result<Vec<RatingRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_ratings_csv(BufReader::new(file)).with_context(|| format!("reading ratings from {}", path.display()))
}

pub fn save_ratings(path: &Path, records: &[RatingRecord]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_ratings_csv(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_embedding(path: &Path) -> anyhow::Result<EmbeddingModel> {
    let ck: EmbeddingCheckpoint = read_json(path)?;
    EmbeddingModel::from_checkpoint(&ck).with_context(|| format!("loading {}", path.display()))
}

pub fn load_predictor(path: &Path) -> anyhow::Result<PredictorModel> {
    let ck: PredictorCheckpoint = read_json(path)?;
    PredictorModel::from_checkpoint(&ck).with_context(|| format!("loading {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyngenOptions {
    pub tags: usize,
    pub per_tag: usize,
    pub seed: u64,
    pub workers: usize,
    pub spam_fraction: f64,
    pub noise: f64,
}

impl Default for SyngenOptions {
    fn default() -> Self {
        Self {
            tags: 10,
            per_tag: 60,
            seed: 7,
            workers: 100,
            spam_fraction: 0.1,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyngenSummary {
    pub icons: usize,
    pub submissions: usize,
    pub planted_spam: usize,
    pub rejected: usize,
    pub rejected_spam: usize,
    pub records: usize,
}

/// Writes the icon file, raw submissions, planted-spam ids, and the ratings
/// that pass worker validation.
pub fn syngen(out: &Path, opts: &SyngenOptions) -> anyhow::Result<SyngenSummary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let protos = default_prototypes(opts.tags);
    if protos.len() < opts.tags {
        bail!("at most {} synthetic tags are available", protos.len());
    }
    let icons: Vec<VectorIcon> = generate_synthetic_icons(&protos, opts.per_tag, opts.seed)?
        .into_iter()
        .map(|s| s.icon)
        .collect();
    let oracle = RatingOracle::new(&protos, opts.noise, opts.seed);
    let ratings = generate_ratings(
        &icons,
        &oracle,
        &RatingGenConfig {
            workers: opts.workers,
            spam_fraction: opts.spam_fraction,
            seed: opts.seed,
            ..Default::default()
        },
    )?;
    let mut records = Vec::new();
    let mut rejected = BTreeSet::new();
    for s in &ratings.submissions {
        match validate_worker(s)? {
            Validation::Accepted(r) => records.extend(r),
            Validation::Rejected(_) => {
                rejected.insert(s.worker_id.clone());
            }
        }
    }
    save_icons(&out.join(ICONS), &icons)?;
    write_json(&out.join(SUBMISSIONS), &ratings.submissions)?;
    write_json(&out.join(SPAM), &ratings.spam)?;
    save_ratings(&out.join(RATINGS), &records)?;
    Ok(SyngenSummary {
        icons: icons.len(),
        submissions: ratings.submissions.len(),
        planted_spam: ratings.spam.len(),
        rejected: rejected.len(),
        rejected_spam: ratings.spam.keys().filter(|w| rejected.contains(*w)).count(),
        records: records.len(),
    })
}

pub fn load_submissions(path: &Path) -> anyhow::Result<Vec<WorkerSubmission>> {
    read_json(path)
}

pub fn curate(icons_path: &Path, config: &CurationConfig) -> anyhow::Result<CurationManifest> {
    Ok(run_curation(&load_icons(icons_path)?, config)?)
}

/// Held-out icons (a fixed fraction of every tag) and held-out tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub test_icons: Vec<String>,
    pub unseen_tags: Vec<String>,
}

impl Split {
    /// Within each primary tag, icons are ordered by a seeded hash of their id
    /// and the first `ceil(test_fraction · n)` are held out.
    pub fn new(icons: &[VectorIcon], test_fraction: f64, unseen: usize, seed: u64) -> anyhow::Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            bail!("test fraction must be in [0, 1)");
        }
        let mut by_tag: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for icon in icons {
            by_tag.entry(icon.primary_tag()).or_default().push(&icon.id);
        }
        let key = |id: &str| Sha256::digest(format!("{seed}:{id}"));
        let mut test_icons = Vec::new();
        for ids in by_tag.values_mut() {
            ids.sort_by_cached_key(|id| key(id));
            let n = (test_fraction * ids.len() as f64).ceil() as usize;
            test_icons.extend(ids.iter().take(n).map(|s| s.to_string()));
        }
        test_icons.sort();
        let tags: Vec<String> = by_tag.keys().map(|t| t.to_string()).collect();
        let (_, mut unseen_tags) = split_tags(&tags, unseen, seed)?;
        unseen_tags.sort();
        Ok(Self {
            seed,
            test_icons,
            unseen_tags,
        })
    }

    pub fn is_test(&self, icon_id: &str) -> bool {
        self.test_icons.binary_search_by(|t| t.as_str().cmp(icon_id)).is_ok()
    }

    pub fn is_unseen(&self, tag: &str) -> bool {
        self.unseen_tags.iter().any(|t| t == tag)
    }
}

/// Reads `split.json`, creating it on first use.
pub fn load_or_create_split(dir: &Path, icons: &[VectorIcon], seed: u64) -> anyhow::Result<Split> {
    let path = dir.join(SPLIT);
    if path.exists() {
        return read_json(&path);
    }
    let split = Split::new(icons, DEFAULT_TEST_FRACTION, DEFAULT_UNSEEN_TAGS, seed)?;
    write_json(&path, &split)?;
    Ok(split)
}

fn labeled_rasters(
    icons: &[VectorIcon],
    resolution: usize,
    keep: impl Fn(&VectorIcon) -> bool,
) -> anyhow::Result<Vec<(GrayscaleImage, Vec<String>)>> {
    icons
        .iter()
        .filter(|i| keep(i))
        .map(|i| Ok((rasterize(i, resolution)?, i.tags().to_vec())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingOutcome {
    pub train_pairs: usize,
    pub seconds: f64,
    pub report: TrainReport,
}

/// Trains on every icon outside the held-out icon split.
pub fn train_embedding(dir: &Path, config: &EmbeddingConfig) -> anyhow::Result<EmbeddingOutcome> {
    let icons = load_icons(&dir.join(ICONS))?;
    let split = load_or_create_split(dir, &icons, config.seed)?;
    let data = labeled_rasters(&icons, config.resolution, |i| !split.is_test(&i.id))?;
    let start = Instant::now();
    let (model, report) = fit_embedding(&data, config)?;
    let seconds = start.elapsed().as_secs_f64();
    write_json(&dir.join(EMBEDDING), &model.to_checkpoint())?;
    Ok(EmbeddingOutcome {
        train_pairs: data.len(),
        seconds,
        report,
    })
}

/// Leave-one-out MAP@k among the held-out icons.
pub fn eval_retrieval(dir: &Path, k: usize) -> anyhow::Result<MapReport> {
    let icons = load_icons(&dir.join(ICONS))?;
    let split: Split = read_json(&dir.join(SPLIT))?;
    let model = load_embedding(&dir.join(EMBEDDING))?;
    let test = labeled_rasters(&icons, model.resolution, |i| split.is_test(&i.id))?;
    Ok(eval_map_at_k(&model, &test, k)?)
}

/// Predictor examples partitioned by the split: training and in-domain test
/// cover seen tags only; out-of-domain holds the unseen tags' own icons.
/// Records pairing an unseen tag with a seen icon (or the reverse) are dropped.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub train: Vec<PredictorExample>,
    pub test: Vec<PredictorExample>,
    pub out_of_domain: Vec<PredictorExample>,
}

pub fn partition(examples: Vec<PredictorExample>, icons: &[VectorIcon], split: &Split) -> Partition {
    let primary: BTreeMap<&str, &str> = icons.iter().map(|i| (i.id.as_str(), i.primary_tag())).collect();
    let mut p = Partition::default();
    for ex in examples {
        let icon_tag = primary.get(ex.icon_id.as_str()).copied().unwrap_or_default();
        match (split.is_unseen(&ex.tag), split.is_unseen(icon_tag)) {
            (false, false) if split.is_test(&ex.icon_id) => p.test.push(ex),
            (false, false) => p.train.push(ex),
            (true, true) if icon_tag == ex.tag => p.out_of_domain.push(ex),
            _ => {}
        }
    }
    p
}

fn examples(dir: &Path, embedding: &EmbeddingModel) -> anyhow::Result<(Partition, Split)> {
    let icons = load_icons(&dir.join(ICONS))?;
    let records = load_ratings(&dir.join(RATINGS))?;
    let split: Split = read_json(&dir.join(SPLIT)).context("run train-embedding first to create the split")?;
    let all = build_examples(embedding, &icons, &records)?;
    Ok((partition(all, &icons, &split), split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorOutcome {
    pub train_examples: usize,
    pub seconds: f64,
    pub report: PredictorTrainReport,
}

pub fn train_predictor(dir: &Path, config: &PredictorConfig) -> anyhow::Result<PredictorOutcome> {
    let embedding = load_embedding(&dir.join(EMBEDDING))?;
    let (part, _) = examples(dir, &embedding)?;
    let start = Instant::now();
    let (model, report) = fit_predictor(&part.train, config)?;
    let seconds = start.elapsed().as_secs_f64();
    write_json(&dir.join(PREDICTOR), &model.to_checkpoint())?;
    Ok(PredictorOutcome {
        train_examples: part.train.len(),
        seconds,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub examples: usize,
    /// Semantic distance then familiarity.
    pub heads: Vec<HeadReport>,
    /// Accuracy of always answering the training set's most common level.
    pub majority_baseline: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorEval {
    pub unseen_tags: Vec<String>,
    pub train: EvalSection,
    pub in_domain: EvalSection,
    pub out_of_domain: EvalSection,
}

fn majority_level(train: &[PredictorExample], head: usize) -> usize {
    let mut counts = [0usize; LEVELS];
    for e in train {
        let level = if head == 0 { e.semantic_distance } else { e.familiarity };
        counts[level.index()] += 1;
    }
    // Lowest level among the most frequent, like mode aggregation.
    (0..LEVELS).rev().max_by_key(|&i| counts[i]).unwrap_or(0)
}

fn section(model: &PredictorModel, set: &[PredictorExample], majority: [usize; 2]) -> anyhow::Result<EvalSection> {
    if set.is_empty() {
        return Ok(EvalSection {
            examples: 0,
            heads: Vec::new(),
            majority_baseline: [0.0; 2],
        });
    }
    let heads = eval_precision_recall(model, set)?.to_vec();
    let baseline = |h: usize| {
        set.iter()
            .filter(|e| if h == 0 { e.semantic_distance } else { e.familiarity }.index() == majority[h])
            .count() as f64
            / set.len() as f64
    };
    Ok(EvalSection {
        examples: set.len(),
        heads,
        majority_baseline: [baseline(0), baseline(1)],
    })
}

pub fn eval_predictor(dir: &Path) -> anyhow::Result<PredictorEval> {
    let embedding = load_embedding(&dir.join(EMBEDDING))?;
    let model = load_predictor(&dir.join(PREDICTOR))?;
    let (part, split) = examples(dir, &embedding)?;
    let majority = [majority_level(&part.train, 0), majority_level(&part.train, 1)];
    Ok(PredictorEval {
        unseen_tags: split.unseen_tags,
        train: section(&model, &part.train, majority)?,
        in_domain: section(&model, &part.test, majority)?,
        out_of_domain: section(&model, &part.out_of_domain, majority)?,
    })
}

/// Accepts a JSON array of icons, `{"icons": [...]}`, or icon JSON-lines.
pub fn load_icon_set(path: &Path) -> anyhow::Result<Vec<VectorIcon>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum SetFile {
        Bare(Vec<VectorIcon>),
        Wrapped { icons: Vec<VectorIcon> },
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str::<SetFile>(&text) {
        Ok(SetFile::Bare(icons)) | Ok(SetFile::Wrapped { icons }) => Ok(icons),
        Err(_) => read_icons(text.as_bytes()).with_context(|| format!("{} is not an icon set", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredIcon {
    pub id: String,
    #[serde(flatten)]
    pub score: ScoreBreakdown,
    pub best: bool,
}

/// Usability score per icon of a set, using the models in `config.data_dir`.
pub fn score(config: &EngineConfig, set: &[VectorIcon], weights: ScoreWeights) -> anyhow::Result<Vec<ScoredIcon>> {
    let engine = Engine::load(config)?;
    score_with(&engine, set, weights)
}

pub fn score_with(engine: &Engine, set: &[VectorIcon], weights: ScoreWeights) -> anyhow::Result<Vec<ScoredIcon>> {
    if set.is_empty() {
        bail!("the icon set is empty");
    }
    let mut scores = engine.score_set(set)?;
    for s in &mut scores {
        s.score = evicon_core::distinguishability::usability_score(&weights, s.phi_sd, s.phi_fam, s.phi_vd)?;
    }
    let candidates: Vec<(f64, f64, f64)> = scores.iter().map(|s| (s.phi_sd, s.phi_fam, s.phi_vd)).collect();
    let best = argmax_candidates(&weights, &candidates)?;
    Ok(set
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (icon, score))| ScoredIcon {
            id: icon.id.clone(),
            score,
            best: best == Some(i),
        })
        .collect())
}

/// Engine settings for a data directory with everything else default.
pub fn engine_config(dir: &Path) -> EngineConfig {
    EngineConfig {
        data_dir: dir.to_path_buf(),
        ..Default::default()
    }
}
