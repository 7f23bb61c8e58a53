//! Transport-free request handlers. Each takes raw body bytes or path/query
//! strings and returns a JSON value or an [`ApiError`]; `http` only adapts.

use std::collections::BTreeMap;
use std::sync::Arc;

use evicon_core::predictor::UsabilityPrediction;
use evicon_core::ratings::Demographics;
use evicon_core::{Stroke, VectorIcon};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::{Engine, Feedback, ScoreBreakdown, Warning};
use crate::store::Store;

pub const DEFAULT_SUGGESTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(400, code, message)
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(404, code, message)
    }

    pub fn body(&self) -> Value {
        json!({ "error": self.code, "message": self.message })
    }
}

impl From<evicon_core::Error> for ApiError {
    fn from(e: evicon_core::Error) -> Self {
        use evicon_core::Error as E;
        let code = match e {
            E::DimensionMismatch { .. } => "dimension_mismatch",
            E::InvalidIcon(_) => "invalid_icon",
            _ => "invalid_argument",
        };
        Self::bad_request(code, e.to_string())
    }
}

fn internal(e: anyhow::Error) -> ApiError {
    ApiError::new(500, "internal", format!("{e:#}"))
}

pub type ApiResult = Result<Value, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_body", e.to_string()))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("responses serialize")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSet {
    icons: Vec<VectorIcon>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateIcon {
    strokes: Vec<Stroke>,
    #[serde(default)]
    tags: Option<Vec<String>>,
    /// Revision the client edited from; a stale value is a conflict.
    #[serde(default)]
    base_revision: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    icon: VectorIcon,
    #[serde(default)]
    tags: Option<Vec<String>>,
    #[serde(default)]
    demographics: Option<Demographics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateResponse {
    pub set_id: String,
    pub revision: u64,
    pub icon_id: String,
    pub prediction: Feedback,
    pub warning: Warning,
    pub score: ScoreBreakdown,
}

pub struct App {
    pub engine: Arc<Engine>,
    pub store: Store,
}

impl App {
    pub fn new(engine: Arc<Engine>, store: Store) -> Self {
        Self { engine, store }
    }

    pub fn health(&self) -> Value {
        json!({ "status": "ok", "model_versions": self.engine.model_versions() })
    }

    fn general_predictions(&self, icons: &[VectorIcon]) -> Result<BTreeMap<String, UsabilityPrediction>, ApiError> {
        icons
            .iter()
            .map(|i| Ok((i.id.clone(), self.engine.predict(i, i.tags(), None)?)))
            .collect()
    }

    pub fn create_set(&self, body: &[u8]) -> ApiResult {
        let req: CreateSet = parse(body)?;
        if req.icons.is_empty() {
            return Err(ApiError::bad_request("empty_set", "an icon set needs at least one icon"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for icon in &req.icons {
            if !seen.insert(icon.id.as_str()) {
                return Err(ApiError::bad_request(
                    "duplicate_icon_id",
                    format!("icon id {:?} appears twice", icon.id),
                ));
            }
        }
        let predictions = self.general_predictions(&req.icons)?;
        let record = self.store.insert(req.icons, predictions).map_err(internal)?;
        Ok(json!({ "set_id": record.set_id }))
    }

    pub fn get_set(&self, set_id: &str) -> ApiResult {
        let shared = self.find_set(set_id)?;
        let record = shared.lock().unwrap();
        Ok(to_value(&*record))
    }

    pub fn update_icon(&self, set_id: &str, icon_id: &str, body: &[u8]) -> ApiResult {
        let req: UpdateIcon = parse(body)?;
        let shared = self.find_set(set_id)?;
        let mut record = shared.lock().unwrap();
        let index = record
            .position(icon_id)
            .ok_or_else(|| ApiError::not_found("icon_not_found", format!("no icon {icon_id:?} in set {set_id}")))?;
        if let Some(base) = req.base_revision {
            if base != record.revision {
                return Err(ApiError::new(
                    409,
                    "revision_conflict",
                    format!("edited revision {base}, set is at {}", record.revision),
                ));
            }
        }
        let mut icon = record.icons[index].with_strokes(req.strokes);
        if let Some(tags) = req.tags {
            icon = icon.with_tags(tags)?;
        }
        let mut icons = record.icons.clone();
        icons[index] = icon.clone();
        let prediction = self.engine.feedback(&icon)?;
        let score = self.engine.score_icon(&icons, index)?;
        let warning = self.engine.warning(&icon);

        record.icons = icons;
        record.predictions.insert(icon.id.clone(), prediction.general.prediction);
        record.revision += 1;
        self.store.persist(&record).map_err(internal)?;
        Ok(to_value(&UpdateResponse {
            set_id: record.set_id.clone(),
            revision: record.revision,
            icon_id: icon.id,
            prediction,
            warning,
            score,
        }))
    }

    pub fn predict(&self, body: &[u8]) -> ApiResult {
        let req: PredictRequest = parse(body)?;
        let tags = req.tags.unwrap_or_else(|| req.icon.tags().to_vec());
        if tags.is_empty() {
            return Err(ApiError::bad_request("invalid_argument", "at least one tag is required"));
        }
        Ok(to_value(&self.engine.predict(&req.icon, &tags, req.demographics)?))
    }

    pub fn graph(&self, set_id: &str, query: &BTreeMap<String, String>) -> ApiResult {
        let threshold = match query.get("threshold") {
            None => self.engine.settings.warning_threshold,
            Some(raw) => raw
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| ApiError::bad_request("invalid_threshold", format!("threshold {raw:?}")))?,
        };
        let icons = self.find_set(set_id)?.lock().unwrap().icons.clone();
        Ok(to_value(&self.engine.graph(&icons, threshold)?))
    }

    /// The icon is looked up in `?set=` when given, otherwise in the stored
    /// sets in id order, then in the dataset.
    pub fn suggestions(&self, icon_id: &str, query: &BTreeMap<String, String>) -> ApiResult {
        let k = match query.get("k") {
            None => DEFAULT_SUGGESTIONS,
            Some(raw) => raw
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| ApiError::bad_request("invalid_k", format!("k {raw:?}")))?,
        };
        let icon = self.find_icon(icon_id, query.get("set").map(String::as_str))?;
        Ok(json!({
            "icon_id": icon_id,
            "k": k,
            "neighbors": to_value(&self.engine.suggestions(&icon, k)?),
        }))
    }

    fn find_set(&self, set_id: &str) -> Result<crate::store::SharedRecord, ApiError> {
        self.store
            .get(set_id)
            .ok_or_else(|| ApiError::not_found("set_not_found", format!("no icon set {set_id:?}")))
    }

    fn find_icon(&self, icon_id: &str, set: Option<&str>) -> Result<VectorIcon, ApiError> {
        let in_set = |id: &str| {
            self.store.get(id).and_then(|s| {
                let r = s.lock().unwrap();
                r.position(icon_id).map(|i| r.icons[i].clone())
            })
        };
        if let Some(set_id) = set {
            self.find_set(set_id)?;
            return in_set(set_id)
                .ok_or_else(|| ApiError::not_found("icon_not_found", format!("no icon {icon_id:?} in set {set_id}")));
        }
        self.store
            .ids()
            .iter()
            .find_map(|id| in_set(id))
            .or_else(|| self.engine.dataset().iter().find(|i| i.id == icon_id).cloned())
            .ok_or_else(|| ApiError::not_found("icon_not_found", format!("no icon {icon_id:?}")))
    }
}
