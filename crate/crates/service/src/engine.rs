use std::collections::BTreeMap;

use anyhow::Context;
use evicon_core::distinguishability::{
    build_graph, normalize_phi_vd, phi_vd, project_2d, usability_score, DistinguishabilityGraph, Projection2D,
    ProjectionMethod, ScoreWeights,
};
use evicon_core::embedding::{nearest_neighbors, Embedding, EmbeddingCheckpoint, EmbeddingModel};
use evicon_core::icon::{diff_strokes, read_icons};
use evicon_core::predictor::{
    level_label, phi_fam, phi_sd, LevelLabel, PredictorCheckpoint, PredictorModel, UsabilityPrediction,
    DEMOGRAPHICS_DIM,
};
use evicon_core::ratings::Demographics;
use evicon_core::{par, EditSuggestion, Error, Result, VectorIcon};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EngineConfig;

/// Scoring knobs that do not live in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub weights: ScoreWeights,
    pub warning_threshold: f64,
    pub projection: ProjectionMethod,
    pub projection_seed: u64,
}

impl From<&EngineConfig> for Settings {
    fn from(c: &EngineConfig) -> Self {
        Self {
            weights: c.weights,
            warning_threshold: c.warning_threshold,
            projection: c.projection,
            projection_seed: c.projection_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Labels {
    pub semantic_distance: LevelLabel,
    pub familiarity: LevelLabel,
}

impl Labels {
    pub fn of(p: &UsabilityPrediction) -> Self {
        Self {
            semantic_distance: level_label(&p.semantic_distance),
            familiarity: level_label(&p.familiarity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionView {
    #[serde(flatten)]
    pub prediction: UsabilityPrediction,
    pub labels: Labels,
}

impl From<UsabilityPrediction> for PredictionView {
    fn from(prediction: UsabilityPrediction) -> Self {
        Self {
            labels: Labels::of(&prediction),
            prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemographicPrediction {
    pub demographics: Demographics,
    #[serde(flatten)]
    pub view: PredictionView,
}

/// General prediction plus one tab per demographic cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feedback {
    pub general: PredictionView,
    pub per_demographic: Vec<DemographicPrediction>,
}

/// The usability score terms for one icon of a set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub phi_sd: f64,
    pub phi_fam: f64,
    pub phi_vd: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Warning {
    /// Dataset icon the hints were diffed against.
    pub reference: Option<String>,
    #[serde(flatten)]
    pub suggestion: EditSuggestion,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suggestion {
    pub icon_id: String,
    pub tags: Vec<String>,
    pub similarity: f64,
    pub labels: Labels,
}

/// Loaded models plus the precomputed dataset index. Read-only once built.
#[derive(Debug)]
pub struct Engine {
    pub settings: Settings,
    embedding: EmbeddingModel,
    predictor: PredictorModel,
    dataset: Vec<VectorIcon>,
    dataset_embeddings: Vec<Embedding>,
    dataset_predictions: Vec<UsabilityPrediction>,
    dataset_scores: Vec<f64>,
    model_versions: BTreeMap<String, String>,
}

fn version<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("in-memory values serialize");
    Sha256::digest(json).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

impl Engine {
    pub fn load(config: &EngineConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let read = |p| {
            let path = config.resolve(p);
            std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
        };
        let emb: EmbeddingCheckpoint = serde_json::from_str(&read(&config.embedding_path)?)
            .context("embedding checkpoint is not valid JSON")?;
        let pred: PredictorCheckpoint = serde_json::from_str(&read(&config.predictor_path)?)
            .context("predictor checkpoint is not valid JSON")?;
        let embedding = EmbeddingModel::from_checkpoint(&emb).context("bad embedding checkpoint")?;
        let predictor = PredictorModel::from_checkpoint(&pred).context("bad predictor checkpoint")?;
        if embedding.dim != config.dim {
            anyhow::bail!("embedding checkpoint has D={}, config expects {}", embedding.dim, config.dim);
        }
        let dataset = read_icons(read(&config.dataset_path)?.as_bytes()).context("bad dataset file")?;
        Ok(Self::new(embedding, predictor, dataset, Settings::from(config))?)
    }

    pub fn new(
        embedding: EmbeddingModel,
        predictor: PredictorModel,
        dataset: Vec<VectorIcon>,
        settings: Settings,
    ) -> Result<Self> {
        if predictor.input_dim() != 2 * embedding.dim + DEMOGRAPHICS_DIM {
            return Err(Error::DimensionMismatch {
                expected: 2 * embedding.dim + DEMOGRAPHICS_DIM,
                got: predictor.input_dim(),
            });
        }
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let mut model_versions = BTreeMap::new();
        model_versions.insert("embedding".to_string(), version(&embedding.to_checkpoint()));
        model_versions.insert("predictor".to_string(), version(&predictor.to_checkpoint()));
        model_versions.insert("dataset".to_string(), version(&dataset));
        let mut engine = Self {
            settings,
            embedding,
            predictor,
            dataset,
            dataset_embeddings: Vec::new(),
            dataset_predictions: Vec::new(),
            dataset_scores: Vec::new(),
            model_versions,
        };
        engine.dataset_embeddings = par::map(&engine.dataset, |i| engine.embedding.encode_icon(i))
            .into_iter()
            .collect::<Result<_>>()?;
        engine.dataset_predictions = par::map_range(engine.dataset.len(), |i| {
            engine.predict_embedded(&engine.dataset_embeddings[i], engine.dataset[i].tags(), None)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        engine.dataset_scores = par::map_range(engine.dataset.len(), |i| {
            engine.score_at(&engine.dataset_embeddings, i, &engine.dataset_predictions[i])
                .map(|s| s.score)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        Ok(engine)
    }

    pub fn model_versions(&self) -> &BTreeMap<String, String> {
        &self.model_versions
    }

    pub fn embedding(&self) -> &EmbeddingModel {
        &self.embedding
    }

    pub fn predictor(&self) -> &PredictorModel {
        &self.predictor
    }

    pub fn dataset(&self) -> &[VectorIcon] {
        &self.dataset
    }

    pub fn dataset_embeddings(&self) -> &[Embedding] {
        &self.dataset_embeddings
    }

    pub fn dataset_predictions(&self) -> &[UsabilityPrediction] {
        &self.dataset_predictions
    }

    pub fn dataset_scores(&self) -> &[f64] {
        &self.dataset_scores
    }

    pub fn embed(&self, icon: &VectorIcon) -> Result<Embedding> {
        self.embedding.encode_icon(icon)
    }

    fn predict_embedded<S: AsRef<str>>(
        &self,
        image: &Embedding,
        tags: &[S],
        demographics: Option<Demographics>,
    ) -> Result<UsabilityPrediction> {
        let text = self.embedding.encode_tags(tags)?;
        match demographics {
            Some(d) => self.predictor.predict(image.as_slice(), text.as_slice(), d),
            None => self.predictor.predict_general(image.as_slice(), text.as_slice()),
        }
    }

    /// Omitting demographics gives the average over all nine cells.
    pub fn predict<S: AsRef<str>>(
        &self,
        icon: &VectorIcon,
        tags: &[S],
        demographics: Option<Demographics>,
    ) -> Result<UsabilityPrediction> {
        self.predict_embedded(&self.embed(icon)?, tags, demographics)
    }

    pub fn feedback(&self, icon: &VectorIcon) -> Result<Feedback> {
        let image = self.embed(icon)?;
        let general = self.predict_embedded(&image, icon.tags(), None)?;
        let per_demographic = Demographics::all()
            .into_iter()
            .map(|d| {
                Ok(DemographicPrediction {
                    demographics: d,
                    view: self.predict_embedded(&image, icon.tags(), Some(d))?.into(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Feedback {
            general: general.into(),
            per_demographic,
        })
    }

    fn score_at(&self, embeddings: &[Embedding], index: usize, p: &UsabilityPrediction) -> Result<ScoreBreakdown> {
        let others: Vec<&[f64]> = embeddings
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != index)
            .map(|(_, e)| e.as_slice())
            .collect();
        let vd = if others.is_empty() {
            0.0
        } else {
            normalize_phi_vd(phi_vd(&others, embeddings[index].as_slice()), embeddings.len())?
        };
        let (sd, fam) = (phi_sd(p), phi_fam(p));
        Ok(ScoreBreakdown {
            phi_sd: sd,
            phi_fam: fam,
            phi_vd: vd,
            score: usability_score(&self.settings.weights, sd, fam, vd)?,
        })
    }

    /// Usability score for every icon of a set, distinguishability measured within the set.
    pub fn score_set(&self, icons: &[VectorIcon]) -> Result<Vec<ScoreBreakdown>> {
        let embeddings = self.embed_all(icons)?;
        par::map_range(icons.len(), |i| {
            let p = self.predict_embedded(&embeddings[i], icons[i].tags(), None)?;
            self.score_at(&embeddings, i, &p)
        })
        .into_iter()
        .collect()
    }

    pub fn score_icon(&self, icons: &[VectorIcon], index: usize) -> Result<ScoreBreakdown> {
        let embeddings = self.embed_all(icons)?;
        let p = self.predict_embedded(&embeddings[index], icons[index].tags(), None)?;
        self.score_at(&embeddings, index, &p)
    }

    fn embed_all(&self, icons: &[VectorIcon]) -> Result<Vec<Embedding>> {
        par::map(icons, |i| self.embed(i)).into_iter().collect()
    }

    /// Highest-scoring dataset icon carrying `tag`; ties go to the earlier icon.
    pub fn reference_for(&self, tag: &str) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, icon) in self.dataset.iter().enumerate() {
            if icon.tags().iter().any(|t| t == tag)
                && best.is_none_or(|b| self.dataset_scores[i] > self.dataset_scores[b])
            {
                best = Some(i);
            }
        }
        best
    }

    pub fn warning(&self, icon: &VectorIcon) -> Warning {
        match self.reference_for(icon.primary_tag()) {
            Some(r) => Warning {
                reference: Some(self.dataset[r].id.clone()),
                suggestion: diff_strokes(icon, &self.dataset[r]),
            },
            None => Warning {
                reference: None,
                suggestion: EditSuggestion::default(),
            },
        }
    }

    pub fn projection(&self, embeddings: &[Embedding]) -> Result<Projection2D> {
        if embeddings.len() == 1 {
            return Ok(Projection2D {
                method: self.settings.projection,
                coordinates: vec![[0.0, 0.0]],
                seed: self.settings.projection_seed,
            });
        }
        project_2d(embeddings, self.settings.projection, self.settings.projection_seed)
    }

    pub fn graph(&self, icons: &[VectorIcon], threshold: f64) -> Result<DistinguishabilityGraph> {
        let embeddings = self.embed_all(icons)?;
        let ids: Vec<String> = icons.iter().map(|i| i.id.clone()).collect();
        build_graph(&ids, &embeddings, &self.projection(&embeddings)?, threshold)
    }

    pub fn suggestions(&self, icon: &VectorIcon, k: usize) -> Result<Vec<Suggestion>> {
        let query = self.embed(icon)?;
        let k = k.min(self.dataset.len());
        Ok(nearest_neighbors(&query, &self.dataset_embeddings, k)?
            .into_iter()
            .map(|(i, similarity)| Suggestion {
                icon_id: self.dataset[i].id.clone(),
                tags: self.dataset[i].tags().to_vec(),
                similarity,
                labels: Labels::of(&self.dataset_predictions[i]),
            })
            .collect())
    }
}
