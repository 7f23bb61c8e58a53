//! Visual distinguishability, the combined usability score, 2-D layout of
//! the embedding space and the warning graph over an icon set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::fit_pca_rows;
use crate::embedding::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_WARNING_THRESHOLD: f64 = 0.3;
pub const NEIGHBOR_K: usize = 5;
pub const NEIGHBOR_STEPS: usize = 200;
const NEGATIVES_PER_EDGE: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared Euclidean distances from `target` to every other member.
/// An empty remainder gives 0.
pub fn phi_vd<E: AsRef<[f64]>>(others: &[E], target: &[f64]) -> f64 {
    others.iter().map(|o| sq_dist(o.as_ref(), target)).sum()
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}

/// Scales [`phi_vd`] of a unit-vector set of `set_size` members into `[0, 1]`.
pub fn normalize_phi_vd(raw: f64, set_size: usize) -> Result<f64> {
    if set_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "set of {set_size} has no other members"
        )));
    }
    Ok((raw / (4.0 * (set_size - 1) as f64)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct ScoreWeights {
    w_sd: f64,
    w_fam: f64,
    w_vd: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    w_sd: f64,
    w_fam: f64,
    w_vd: f64,
}

impl TryFrom<RawWeights> for ScoreWeights {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        ScoreWeights::new(r.w_sd, r.w_fam, r.w_vd)
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_sd: 1.0 / 3.0,
            w_fam: 1.0 / 3.0,
            w_vd: 1.0 / 3.0,
        }
    }
}

impl ScoreWeights {
    pub fn new(w_sd: f64, w_fam: f64, w_vd: f64) -> Result<Self> {
        let w = [w_sd, w_fam, w_vd];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weights must be non-negative, got {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidArgument("weights are all zero".into()));
        }
        Ok(Self { w_sd, w_fam, w_vd })
    }

    pub fn w_sd(&self) -> f64 {
        self.w_sd
    }

    pub fn w_fam(&self) -> f64 {
        self.w_fam
    }

    pub fn w_vd(&self) -> f64 {
        self.w_vd
    }
}

impl std::str::FromStr for ScoreWeights {
    type Err = Error;

    /// `"w_sd,w_fam,w_vd"`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("weights {s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => ScoreWeights::new(*a, *b, *c),
            _ => Err(Error::Parse(format!("expected three weights, got {s:?}"))),
        }
    }
}

/// `w_sd·φ_sd + w_fam·φ_fam + w_vd·φ_vd` with every φ in `[0, 1]`.
pub fn usability_score(weights: &ScoreWeights, phi_sd: f64, phi_fam: f64, phi_vd_normalized: f64) -> Result<f64> {
    for (name, v) in [("phi_sd", phi_sd), ("phi_fam", phi_fam), ("phi_vd", phi_vd_normalized)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(weights.w_sd * phi_sd + weights.w_fam * phi_fam + weights.w_vd * phi_vd_normalized)
}

/// Index of the best-scoring `(φ_sd, φ_fam, φ_vd)` candidate; ties go to the
/// earliest candidate.
pub fn argmax_candidates(weights: &ScoreWeights, candidates: &[(f64, f64, f64)]) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(s, f, v)) in candidates.iter().enumerate() {
        let score = usability_score(weights, s, f, v)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    Ok(best.map(|(i, _)| i))
}

pub fn mutual_distance_matrix<E: AsRef<[f64]>>(embeddings: &[E]) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(embeddings[i].as_ref(), embeddings[j].as_ref()).sqrt();
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    #[default]
    Pca2d,
    NeighborEmbed,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca2d" => Ok(Self::Pca2d),
            "neighbor-embed" => Ok(Self::NeighborEmbed),
            _ => Err(Error::Parse(format!("unknown projection method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub method: ProjectionMethod,
    pub coordinates: Vec<[f64; 2]>,
    pub seed: u64,
}

pub fn project_2d<E: AsRef<[f64]>>(embeddings: &[E], method: ProjectionMethod, seed: u64) -> Result<Projection2D> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument("projection needs at least 2 points".into()));
    }
    let rows: Vec<&[f64]> = embeddings.iter().map(AsRef::as_ref).collect();
    let pca = pca_2d(&rows)?;
    let coordinates = match method {
        ProjectionMethod::Pca2d => pca,
        ProjectionMethod::NeighborEmbed => neighbor_embed(&rows, &pca, seed),
    };
    Ok(Projection2D {
        method,
        coordinates,
        seed,
    })
}

fn pca_2d(rows: &[&[f64]]) -> Result<Vec<[f64; 2]>> {
    match fit_pca_rows(rows, 1.0) {
        Ok(pca) => rows
            .iter()
            .map(|r| {
                let f = pca.project_vector(r)?;
                Ok([f.first().copied().unwrap_or(0.0), f.get(1).copied().unwrap_or(0.0)])
            })
            .collect(),
        Err(Error::Degenerate(_)) => Ok(vec![[0.0, 0.0]; rows.len()]),
        Err(e) => Err(e),
    }
}

/// Force-directed refinement of a PCA layout: attraction along a symmetric
/// k-NN graph, repulsion from randomly sampled non-neighbors.
fn neighbor_embed(rows: &[&[f64]], init: &[[f64; 2]], seed: u64) -> Vec<[f64; 2]> {
    let n = rows.len();
    let k = NEIGHBOR_K.min(n - 1);
    let mut adjacency = vec![vec![false; n]; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            sq_dist(rows[i], rows[a])
                .total_cmp(&sq_dist(rows[i], rows[b]))
                .then(a.cmp(&b))
        });
        for &j in &order[..k] {
            adjacency[i][j] = true;
            adjacency[j][i] = true;
        }
    }
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| adjacency[i][j])
        .collect();

    // rescale the initial layout to a spread of ~10 units
    let spread = init
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if spread > 0.0 { 10.0 / spread } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = init
        .iter()
        .map(|p| {
            [
                p[0] * scale + rng.random_range(-1e-3..1e-3),
                p[1] * scale + rng.random_range(-1e-3..1e-3),
            ]
        })
        .collect();

    let clip = |v: f64| v.clamp(-4.0, 4.0);
    for step in 0..NEIGHBOR_STEPS {
        let alpha = 1.0 - step as f64 / NEIGHBOR_STEPS as f64;
        for &(i, j) in &edges {
            let d = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
            let d2 = d[0] * d[0] + d[1] * d[1];
            let coeff = -2.0 / (1.0 + d2);
            for c in 0..2 {
                let g = clip(coeff * d[c]) * alpha;
                y[i][c] += g;
                y[j][c] -= g;
            }
            for _ in 0..NEGATIVES_PER_EDGE {
                let m = rng.random_range(0..n);
                if m == i || adjacency[i][m] {
                    continue;
                }
                let d = [y[i][0] - y[m][0], y[i][1] - y[m][1]];
                let d2 = d[0] * d[0] + d[1] * d[1];
                let coeff = 2.0 / ((0.001 + d2) * (1.0 + d2));
                for c in 0..2 {
                    y[i][c] += clip(coeff * d[c]) * alpha;
                }
            }
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: String,
    pub b: String,
    /// Cosine distance in the full embedding space.
    pub distance: f64,
    pub warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinguishabilityGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Complete graph over the set; an edge warns when its cosine distance is
/// below `threshold`.
pub fn build_graph(
    ids: &[String],
    embeddings: &[Embedding],
    projection: &Projection2D,
    threshold: f64,
) -> Result<DistinguishabilityGraph> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("graph needs at least one icon".into()));
    }
    if ids.len() != embeddings.len() || ids.len() != projection.coordinates.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: embeddings.len().min(projection.coordinates.len()),
        });
    }
    let nodes = ids
        .iter()
        .zip(&projection.coordinates)
        .map(|(id, p)| GraphNode {
            id: id.clone(),
            x: p[0],
            y: p[1],
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let distance = 1.0 - embeddings[i].cosine(&embeddings[j]);
            edges.push(GraphEdge {
                a: ids[i].clone(),
                b: ids[j].clone(),
                distance,
                warning: distance < threshold,
            });
        }
    }
    Ok(DistinguishabilityGraph { nodes, edges })
}

/// Mean silhouette coefficient of `points` under `labels`.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let d = |a: usize, b: usize| sq_dist(&points[a], &points[b]).sqrt();
    let clusters: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            if members.is_empty() {
                None
            } else {
                Some(members.iter().map(|&j| d(i, j)).sum::<f64>() / members.len() as f64)
            }
        };
        let Some(a) = mean_to(labels[i]) else {
            continue;
        };
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}
