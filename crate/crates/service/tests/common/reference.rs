use std::collections::BTreeMap;

use evicon_core::distinguishability::{
    build_graph, normalize_phi_vd, phi_vd, project_2d, usability_score, Projection2D, ProjectionMethod, ScoreWeights,
};
use evicon_core::embedding::{nearest_neighbors, Embedding, EmbeddingModel};
use evicon_core::icon::diff_strokes;
use evicon_core::predictor::{level_label, phi_fam, phi_sd, PredictorModel, UsabilityPrediction};
use evicon_core::ratings::Demographics;
use evicon_core::{Stroke, VectorIcon};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{toy_dataset, toy_embedding, toy_predictor};

fn hex6<T: serde::Serialize>(v: &T) -> String {
    Sha256::digest(serde_json::to_vec(v).unwrap())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Set {
    revision: u64,
    icons: Vec<VectorIcon>,
    predictions: BTreeMap<String, UsabilityPrediction>,
}

/// Independent re-derivation of every endpoint from library calls.
pub struct Reference {
    emb: EmbeddingModel,
    pred: PredictorModel,
    dataset: Vec<VectorIcon>,
    dataset_embs: Vec<Embedding>,
    dataset_preds: Vec<UsabilityPrediction>,
    dataset_scores: Vec<f64>,
    weights: ScoreWeights,
    threshold: f64,
    sets: BTreeMap<String, Set>,
}

pub type Expected = Result<Value, (u16, &'static str)>;

fn view(p: &UsabilityPrediction) -> Value {
    json!({
        "semantic_distance": p.semantic_distance,
        "familiarity": p.familiarity,
        "labels": {
            "semantic_distance": level_label(&p.semantic_distance),
            "familiarity": level_label(&p.familiarity),
        },
    })
}

fn labels(p: &UsabilityPrediction) -> Value {
    view(p)["labels"].clone()
}

fn query(uri: &str) -> (String, BTreeMap<String, String>) {
    match uri.split_once('?') {
        None => (uri.to_string(), BTreeMap::new()),
        Some((path, q)) => (
            path.to_string(),
            q.split('&')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        ),
    }
}

impl Reference {
    pub fn new() -> Self {
        let emb = toy_embedding();
        let pred = toy_predictor();
        let dataset = toy_dataset();
        let dataset_embs: Vec<Embedding> = dataset.iter().map(|i| emb.encode_icon(i).unwrap()).collect();
        let dataset_preds: Vec<UsabilityPrediction> = dataset
            .iter()
            .zip(&dataset_embs)
            .map(|(i, e)| {
                pred.predict_general(e.as_slice(), emb.encode_tags(i.tags()).unwrap().as_slice())
                    .unwrap()
            })
            .collect();
        let weights = ScoreWeights::default();
        let n = dataset.len();
        let dataset_scores = (0..n)
            .map(|i| {
                let others: Vec<&Embedding> = (0..n).filter(|&j| j != i).map(|j| &dataset_embs[j]).collect();
                let vd = normalize_phi_vd(phi_vd(&others, dataset_embs[i].as_slice()), n).unwrap();
                let p = &dataset_preds[i];
                usability_score(&weights, phi_sd(p), phi_fam(p), vd).unwrap()
            })
            .collect();
        Self {
            emb,
            pred,
            dataset,
            dataset_embs,
            dataset_preds,
            dataset_scores,
            weights,
            threshold: 0.3,
            sets: BTreeMap::new(),
        }
    }

    fn general<S: AsRef<str>>(&self, icon: &VectorIcon, tags: &[S]) -> UsabilityPrediction {
        let img = self.emb.encode_icon(icon).unwrap();
        let txt = self.emb.encode_tags(tags).unwrap();
        self.pred.predict_general(img.as_slice(), txt.as_slice()).unwrap()
    }

    fn graph(&self, icons: &[VectorIcon], threshold: f64) -> Value {
        let embs: Vec<Embedding> = icons.iter().map(|i| self.emb.encode_icon(i).unwrap()).collect();
        let ids: Vec<String> = icons.iter().map(|i| i.id.clone()).collect();
        let proj = if icons.len() == 1 {
            Projection2D {
                method: ProjectionMethod::Pca2d,
                coordinates: vec![[0.0, 0.0]],
                seed: 0,
            }
        } else {
            project_2d(&embs, ProjectionMethod::Pca2d, 0).unwrap()
        };
        json!(build_graph(&ids, &embs, &proj, threshold).unwrap())
    }

    fn set_json(&self, id: &str) -> Value {
        let s = &self.sets[id];
        json!({ "set_id": id, "revision": s.revision, "icons": s.icons, "predictions": s.predictions })
    }

    pub fn expected(&mut self, method: &str, uri: &str, body: &[u8]) -> Expected {
        let (path, q) = query(uri);
        let seg: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        match (method, seg.as_slice()) {
            ("GET", ["api", "health"]) => Ok(json!({
                "status": "ok",
                "model_versions": {
                    "dataset": hex6(&self.dataset),
                    "embedding": hex6(&self.emb.to_checkpoint()),
                    "predictor": hex6(&self.pred.to_checkpoint()),
                },
            })),
            ("POST", ["api", "icon-sets"]) => {
                #[derive(Deserialize)]
                struct Body {
                    icons: Vec<VectorIcon>,
                }
                let b: Body = serde_json::from_slice(body).map_err(|_| (400, "invalid_body"))?;
                if b.icons.is_empty() {
                    return Err((400, "empty_set"));
                }
                for (i, icon) in b.icons.iter().enumerate() {
                    if b.icons[..i].iter().any(|o| o.id == icon.id) {
                        return Err((400, "duplicate_icon_id"));
                    }
                }
                let id = format!("{:04}-{}", self.sets.len() + 1, hex6(&b.icons));
                let predictions = b.icons.iter().map(|i| (i.id.clone(), self.general(i, i.tags()))).collect();
                self.sets.insert(
                    id.clone(),
                    Set {
                        revision: 0,
                        icons: b.icons,
                        predictions,
                    },
                );
                Ok(json!({ "set_id": id }))
            }
            ("GET", ["api", "icon-sets", id]) => {
                if !self.sets.contains_key(*id) {
                    return Err((404, "set_not_found"));
                }
                Ok(self.set_json(id))
            }
            ("PUT", ["api", "icon-sets", id, "icons", icon_id]) => {
                #[derive(Deserialize)]
                struct Body {
                    strokes: Vec<Stroke>,
                    tags: Option<Vec<String>>,
                    base_revision: Option<u64>,
                }
                let b: Body = serde_json::from_slice(body).map_err(|_| (400, "invalid_body"))?;
                let set = self.sets.get(*id).ok_or((404, "set_not_found"))?;
                let index = set
                    .icons
                    .iter()
                    .position(|i| i.id == *icon_id)
                    .ok_or((404, "icon_not_found"))?;
                if b.base_revision.is_some_and(|r| r != set.revision) {
                    return Err((409, "revision_conflict"));
                }
                let mut icon = set.icons[index].with_strokes(b.strokes);
                if let Some(tags) = b.tags {
                    icon = icon.with_tags(tags).map_err(|_| (400, "invalid_icon"))?;
                }
                let mut icons = set.icons.clone();
                icons[index] = icon.clone();

                let img = self.emb.encode_icon(&icon).unwrap();
                let txt = self.emb.encode_tags(icon.tags()).unwrap();
                let general = self.pred.predict_general(img.as_slice(), txt.as_slice()).unwrap();
                let per_demographic: Vec<Value> = Demographics::all()
                    .into_iter()
                    .map(|d| {
                        let p = self.pred.predict(img.as_slice(), txt.as_slice(), d).unwrap();
                        let mut v = view(&p);
                        v["demographics"] = json!(d);
                        v
                    })
                    .collect();

                let embs: Vec<Embedding> = icons.iter().map(|i| self.emb.encode_icon(i).unwrap()).collect();
                let others: Vec<&Embedding> = (0..icons.len()).filter(|&j| j != index).map(|j| &embs[j]).collect();
                let vd = if others.is_empty() {
                    0.0
                } else {
                    normalize_phi_vd(phi_vd(&others, embs[index].as_slice()), icons.len()).unwrap()
                };
                let (sd, fam) = (phi_sd(&general), phi_fam(&general));
                let score = usability_score(&self.weights, sd, fam, vd).unwrap();

                let mut reference: Option<usize> = None;
                for (i, d) in self.dataset.iter().enumerate() {
                    if d.tags().iter().any(|t| t == icon.primary_tag())
                        && reference.is_none_or(|r| self.dataset_scores[i] > self.dataset_scores[r])
                    {
                        reference = Some(i);
                    }
                }
                let warning = match reference {
                    Some(r) => {
                        let s = diff_strokes(&icon, &self.dataset[r]);
                        json!({ "reference": self.dataset[r].id, "add": s.add, "remove": s.remove })
                    }
                    None => json!({ "reference": null, "add": [], "remove": [] }),
                };

                let set = self.sets.get_mut(*id).unwrap();
                set.icons = icons;
                set.predictions.insert(icon.id.clone(), general);
                set.revision += 1;
                Ok(json!({
                    "set_id": id,
                    "revision": set.revision,
                    "icon_id": icon_id,
                    "prediction": { "general": view(&general), "per_demographic": per_demographic },
                    "warning": warning,
                    "score": { "phi_sd": sd, "phi_fam": fam, "phi_vd": vd, "score": score },
                }))
            }
            ("POST", ["api", "predict"]) => {
                #[derive(Deserialize)]
                struct Body {
                    icon: VectorIcon,
                    tags: Option<Vec<String>>,
                    demographics: Option<Demographics>,
                }
                let b: Body = serde_json::from_slice(body).map_err(|_| (400, "invalid_body"))?;
                let tags = b.tags.unwrap_or_else(|| b.icon.tags().to_vec());
                let img = self.emb.encode_icon(&b.icon).unwrap();
                let txt = self.emb.encode_tags(&tags).unwrap();
                let p = match b.demographics {
                    Some(d) => self.pred.predict(img.as_slice(), txt.as_slice(), d),
                    None => self.pred.predict_general(img.as_slice(), txt.as_slice()),
                }
                .unwrap();
                Ok(json!(p))
            }
            ("GET", ["api", "icon-sets", id, "graph"]) => {
                let threshold = match q.get("threshold") {
                    None => self.threshold,
                    Some(t) => t.parse::<f64>().map_err(|_| (400, "invalid_threshold"))?,
                };
                let set = self.sets.get(*id).ok_or((404, "set_not_found"))?;
                Ok(self.graph(&set.icons, threshold))
            }
            ("GET", ["api", "icons", icon_id, "suggestions"]) => {
                let k = match q.get("k") {
                    None => 5,
                    Some(k) => k.parse::<usize>().ok().filter(|&k| k > 0).ok_or((400, "invalid_k"))?,
                };
                let in_set = |s: &Set| s.icons.iter().find(|i| i.id == *icon_id).cloned();
                let icon = match q.get("set") {
                    Some(sid) => in_set(self.sets.get(sid).ok_or((404, "set_not_found"))?),
                    None => self
                        .sets
                        .values()
                        .find_map(in_set)
                        .or_else(|| self.dataset.iter().find(|i| i.id == *icon_id).cloned()),
                }
                .ok_or((404, "icon_not_found"))?;
                let query = self.emb.encode_icon(&icon).unwrap();
                let neighbors: Vec<Value> =
                    nearest_neighbors(&query, &self.dataset_embs, k.min(self.dataset.len()))
                        .unwrap()
                        .into_iter()
                        .map(|(i, sim)| {
                            json!({
                                "icon_id": self.dataset[i].id,
                                "tags": self.dataset[i].tags(),
                                "similarity": sim,
                                "labels": labels(&self.dataset_preds[i]),
                            })
                        })
                        .collect();
                Ok(json!({ "icon_id": icon_id, "k": k, "neighbors": neighbors }))
            }
            _ => panic!("fixture not covered by the reference: {method} {uri}"),
        }
    }
}
