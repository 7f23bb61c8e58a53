//! Dataset curation: duplicate removal, PCA, K-Means with an elbow
//! criterion, and cluster-stratified sampling of representatives.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icon::{normalize_image, rasterize, GrayscaleImage, VectorIcon};
use crate::par;

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.9;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_PER_CLUSTER: usize = 20;
pub const DEFAULT_RESOLUTION: usize = 28;
pub const MAX_LLOYD_ITERATIONS: usize = 300;

/// Indices of the first occurrence of every bit-identical image, in order.
pub fn dedup(images: &[GrayscaleImage]) -> Result<Vec<usize>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let shape = (first.width(), first.height());
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::with_capacity(images.len());
    let mut kept = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if (img.width(), img.height()) != shape {
            return Err(Error::ImageShape {
                index: i,
                expected: shape,
                got: (img.width(), img.height()),
            });
        }
        let key: Vec<u64> = img.pixels().iter().map(|v| v.to_bits()).collect();
        if seen.insert(key, ()).is_none() {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal principal axes, one per row.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalue of each retained component, descending.
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn explained_ratio(&self) -> f64 {
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }

    pub fn project_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn project(&self, image: &GrayscaleImage) -> Result<Vec<f64>> {
        self.project_vector(image.pixels())
    }

    pub fn reconstruct(&self, features: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (f, c) in features.iter().zip(&self.components) {
            out.iter_mut().zip(c).for_each(|(o, c)| *o += f * c);
        }
        out
    }
}

pub fn fit_pca(images: &[GrayscaleImage], variance_target: f64) -> Result<PcaModel> {
    if let Some(first) = images.first() {
        let shape = (first.width(), first.height());
        if let Some((i, img)) = images
            .iter()
            .enumerate()
            .find(|(_, img)| (img.width(), img.height()) != shape)
        {
            return Err(Error::ImageShape {
                index: i,
                expected: shape,
                got: (img.width(), img.height()),
            });
        }
    }
    let rows: Vec<&[f64]> = images.iter().map(GrayscaleImage::pixels).collect();
    fit_pca_rows(&rows, variance_target)
}

/// PCA on raw feature rows. Uses the covariance matrix when samples outnumber
/// dimensions and the (smaller) Gram matrix otherwise.
pub fn fit_pca_rows<R: AsRef<[f64]>>(rows: &[R], variance_target: f64) -> Result<PcaModel> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 samples".into()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance target {variance_target} outside (0, 1]"
        )));
    }
    let n = rows.len();
    let p = rows[0].as_ref().len();
    if let Some(i) = rows.iter().position(|r| r.as_ref().len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: rows[i].as_ref().len(),
        });
    }
    let mut mean = vec![0.0; p];
    for r in rows {
        mean.iter_mut().zip(r.as_ref()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, p, |i, j| rows[i].as_ref()[j] - mean[j]);
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    if total_variance <= 1e-12 {
        return Err(Error::Degenerate("degenerate dataset: zero variance".into()));
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = if n <= p {
        let gram = (&centered * centered.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        eig.eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 1e-12 * total_variance)
            .map(|(i, &l)| {
                let u = eig.eigenvectors.column(i);
                let v = centered.transpose() * u / (denom * l).sqrt();
                (l, v.iter().copied().collect())
            })
            .collect()
    } else {
        let cov = (centered.transpose() * &centered) / denom;
        let eig = SymmetricEigen::new(cov);
        eig.eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &l)| (l.max(0.0), eig.eigenvectors.column(i).iter().copied().collect()))
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut components = Vec::new();
    let mut explained_variance = Vec::new();
    let mut cum = 0.0;
    for (l, mut v) in pairs {
        canonical_sign(&mut v);
        components.push(v);
        explained_variance.push(l);
        cum += l;
        if cum / total_variance >= variance_target - 1e-12 {
            break;
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let idx = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    if let Some(i) = idx {
        if v[i] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub wcss: f64,
    /// WCSS after every assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| sq_dist(f, &features[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // guard against rounding landing on an already-chosen point
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // all remaining points coincide with chosen centers
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, &features[next]));
        }
    }
    chosen.into_iter().map(|i| features[i].clone()).collect()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = features.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {n} points")));
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: f.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(features, k, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let nearest_all = par::map(features, |f| nearest(f, &centroids));
        let next: Vec<usize> = nearest_all.iter().map(|(c, _)| *c).collect();
        let wcss: f64 = nearest_all.iter().map(|(_, d)| d).sum();
        history.push(wcss);
        iterations += 1;
        let converged = next == assignment;
        assignment = next;
        if converged || iterations >= MAX_LLOYD_ITERATIONS {
            break;
        }
        centroids = update_centroids(features, &assignment, &centroids);
    }
    let wcss = *history.last().unwrap();
    Ok(Clustering {
        k,
        centroids,
        assignment,
        wcss,
        wcss_history: history,
        iterations,
    })
}

fn update_centroids(features: &[Vec<f64>], assignment: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = old.len();
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &c) in features.iter().zip(assignment) {
        sums[c].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        counts[c] += 1;
    }
    let mut centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .zip(old)
        .map(|((s, &n), o)| {
            if n == 0 {
                o.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect();
    // Empty clusters take the point farthest from its own centroid.
    let mut taken = vec![false; features.len()];
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let far = (0..features.len())
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| {
                let da = sq_dist(&features[a], &centroids[assignment[a]]);
                let db = sq_dist(&features[b], &centroids[assignment[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
        if let Some(i) = far {
            taken[i] = true;
            centroids[c] = features[i].clone();
        }
    }
    centroids
}

/// Picks the k of maximum second difference of a WCSS curve that starts at
/// `k_min`; ties resolve to the smaller k.
pub fn elbow_from_curve(k_min: usize, wcss: &[f64]) -> Result<usize> {
    if wcss.len() < 3 {
        return Err(Error::InvalidArgument(
            "elbow needs at least three k values".into(),
        ));
    }
    let mut best = (k_min + 1, f64::NEG_INFINITY);
    for i in 1..wcss.len() - 1 {
        let second = wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1];
        if second > best.1 + 1e-12 * wcss[0].abs().max(1.0) {
            best = (k_min + i, second);
        }
    }
    Ok(best.0)
}

/// Runs K-Means for every k in `k_min..=k_max` and applies [`elbow_from_curve`].
pub fn elbow_k(features: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<usize> {
    if k_min == 0 || k_min >= k_max {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k_min < k_max, got {k_min}..{k_max}"
        )));
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let runs = par::map(&ks, |&k| kmeans(features, k, seed).map(|c| c.wcss));
    let curve = runs.into_iter().collect::<Result<Vec<f64>>>()?;
    elbow_from_curve(k_min, &curve)
}

/// Uniform sample without replacement of up to `per_cluster` members from
/// each cluster, cluster by cluster, ascending within a cluster.
pub fn sample_representatives(clustering: &Clustering, per_cluster: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::new();
    for c in 0..clustering.k {
        let members = clustering.members(c);
        if members.len() <= per_cluster {
            out.extend(members);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), per_cluster)
            .into_iter()
            .map(|i| members[i])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCount {
    Fixed(usize),
    Elbow { k_min: usize, k_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaScope {
    PerTag,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub resolution: usize,
    pub variance_target: f64,
    pub clusters: ClusterCount,
    pub per_cluster: usize,
    pub scope: PcaScope,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            variance_target: DEFAULT_VARIANCE_TARGET,
            clusters: ClusterCount::Fixed(DEFAULT_K),
            per_cluster: DEFAULT_PER_CLUSTER,
            scope: PcaScope::PerTag,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub components: usize,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: f64,
    pub variance_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub icons: usize,
    pub unique: usize,
    pub k: usize,
    pub selected: usize,
}

/// Output of [`curate`]; `pca` is keyed by tag (or `"*"` for global scope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub pca: BTreeMap<String, PcaSummary>,
    pub k: usize,
    pub selected: Vec<String>,
    pub groups: Vec<GroupReport>,
}

/// Full pipeline: rasterize and normalize, drop duplicates, project onto the
/// PCA basis, cluster, and sample per cluster. Groups are processed per
/// primary tag or globally according to `config.scope`.
pub fn curate(icons: &[VectorIcon], config: &CurationConfig) -> Result<CurationManifest> {
    let configured_k = match config.clusters {
        ClusterCount::Fixed(k) => k,
        ClusterCount::Elbow { k_max, .. } => k_max,
    };
    if configured_k == 0 || config.per_cluster == 0 {
        return Err(Error::InvalidArgument("k and per_cluster must be >= 1".into()));
    }
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    match config.scope {
        PcaScope::Global => groups.push(("*".into(), (0..icons.len()).collect())),
        PcaScope::PerTag => {
            let mut index: HashMap<&str, usize> = HashMap::new();
            for (i, icon) in icons.iter().enumerate() {
                let g = *index.entry(icon.primary_tag()).or_insert_with(|| {
                    groups.push((icon.primary_tag().to_string(), Vec::new()));
                    groups.len() - 1
                });
                groups[g].1.push(i);
            }
        }
    }
    let images = par::map(icons, |icon| {
        rasterize(icon, config.resolution).and_then(|r| normalize_image(&r, config.resolution))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut manifest = CurationManifest {
        pca: BTreeMap::new(),
        k: configured_k,
        selected: Vec::new(),
        groups: Vec::new(),
    };
    for (gi, (name, members)) in groups.iter().enumerate() {
        let group_images: Vec<GrayscaleImage> = members.iter().map(|&i| images[i].clone()).collect();
        let unique: Vec<usize> = dedup(&group_images)?.into_iter().map(|i| members[i]).collect();
        let seed = config.seed.wrapping_add(gi as u64);
        let (selected, k) = if unique.len() < 2 {
            (unique.clone(), unique.len())
        } else {
            let unique_images: Vec<GrayscaleImage> = unique.iter().map(|&i| images[i].clone()).collect();
            let pca = fit_pca(&unique_images, config.variance_target)?;
            let features = unique_images
                .iter()
                .map(|img| pca.project(img))
                .collect::<Result<Vec<_>>>()?;
            let k = match config.clusters {
                ClusterCount::Fixed(k) => k.min(features.len()),
                ClusterCount::Elbow { k_min, k_max } => {
                    let k_max = k_max.min(features.len());
                    if k_max >= k_min + 2 {
                        elbow_k(&features, k_min, k_max, seed)?
                    } else {
                        k_max.max(1)
                    }
                }
            };
            let clustering = kmeans(&features, k, seed)?;
            manifest.pca.insert(
                name.clone(),
                PcaSummary {
                    components: pca.dim(),
                    explained_ratio: pca.explained_ratio(),
                    explained_variance: pca.explained_variance.clone(),
                    variance_target: config.variance_target,
                },
            );
            let picked = sample_representatives(&clustering, config.per_cluster, seed);
            (picked.into_iter().map(|i| unique[i]).collect(), k)
        };
        manifest.groups.push(GroupReport {
            group: name.clone(),
            icons: members.len(),
            unique: unique.len(),
            k,
            selected: selected.len(),
        });
        manifest
            .selected
            .extend(selected.iter().map(|&i| icons[i].id.clone()));
    }
    Ok(manifest)
}
