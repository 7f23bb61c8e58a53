use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use evicon_core::predictor::UsabilityPrediction;
use evicon_core::VectorIcon;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A designer's icon set with the latest general prediction per icon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IconSetRecord {
    pub set_id: String,
    pub revision: u64,
    pub icons: Vec<VectorIcon>,
    pub predictions: BTreeMap<String, UsabilityPrediction>,
}

impl IconSetRecord {
    pub fn position(&self, icon_id: &str) -> Option<usize> {
        self.icons.iter().position(|i| i.id == icon_id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }
}

pub type SharedRecord = Arc<Mutex<IconSetRecord>>;

/// Icon sets keyed by id. Each set has its own lock so edits to one set never
/// wait on another; with a directory every mutation is written through.
#[derive(Debug, Default)]
pub struct Store {
    dir: Option<PathBuf>,
    sets: RwLock<BTreeMap<String, SharedRecord>>,
}

/// `{counter}-{first 12 hex digits of sha256(icons json)}`.
pub fn set_id(counter: usize, icons: &[VectorIcon]) -> String {
    let json = serde_json::to_vec(icons).expect("icons serialize");
    let hex: String = Sha256::digest(json).iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{counter:04}-{hex}")
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every `*.json` record under `dir/sets`, creating it if needed.
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        let sets_dir = dir.join("sets");
        std::fs::create_dir_all(&sets_dir).with_context(|| format!("creating {}", sets_dir.display()))?;
        let mut sets = BTreeMap::new();
        for entry in std::fs::read_dir(&sets_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&path)?;
                let record: IconSetRecord =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                sets.insert(record.set_id.clone(), Arc::new(Mutex::new(record)));
            }
        }
        Ok(Self {
            dir: Some(sets_dir),
            sets: RwLock::new(sets),
        })
    }

    pub fn len(&self) -> usize {
        self.sets.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        self.sets.read().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<SharedRecord> {
        self.sets.read().unwrap().get(id).cloned()
    }

    /// Allocates the id under the map's write lock so concurrent creates
    /// get distinct counters.
    pub fn insert(
        &self,
        icons: Vec<VectorIcon>,
        predictions: BTreeMap<String, UsabilityPrediction>,
    ) -> anyhow::Result<IconSetRecord> {
        let mut sets = self.sets.write().unwrap();
        let record = IconSetRecord {
            set_id: set_id(sets.len() + 1, &icons),
            revision: 0,
            icons,
            predictions,
        };
        self.persist(&record)?;
        sets.insert(record.set_id.clone(), Arc::new(Mutex::new(record.clone())));
        Ok(record)
    }

    pub fn persist(&self, record: &IconSetRecord) -> anyhow::Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", record.set_id));
            std::fs::write(&path, record.to_json()).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}
