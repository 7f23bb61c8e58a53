//! Deterministic synthetic data: procedural icon families, one per tag, and
//! a rating oracle driven purely by geometric deformation.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icon::{chamfer_distance, Point, Stroke, VectorIcon};
use crate::par;
use crate::ratings::{
    AgeLevel, Demographics, Occupation, RatingLevel, RatingRecord, TagBlock, WorkerSubmission,
};

pub const STROKE_WIDTH: f64 = 0.06;
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_SCALE_DELTA: f64 = 0.2;
pub const MAX_VERTEX_NOISE: f64 = 0.05;
/// Fraction of stroke width lost at full jitter.
pub const MAX_THINNING: f64 = 0.85;
/// Stray marks added at full jitter.
pub const MAX_CLUTTER: usize = 6;
/// Deformation assigned when an icon is rated against a tag it does not carry.
pub const FOREIGN_DEFORMATION: f64 = 1.5;
/// Mean vertex displacement typical of full jitter.
pub const DISPLACEMENT_UNIT: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Glyph {
    CirclePoly { sides: usize, radius: f64 },
    Cross { arm: f64 },
    Arrow { head: f64 },
    Bars { count: usize },
    Zigzag { teeth: usize },
    Grid { cells: usize },
    Star { points: usize },
    Spiral { turns: f64 },
    Wave { periods: f64 },
    Check,
}

impl Glyph {
    /// Polylines of the undeformed glyph, centered on (0.5, 0.5) and kept
    /// inside [0.15, 0.85] so that scaling and rotation stay on the canvas.
    pub fn polylines(&self) -> Vec<Vec<Point>> {
        match *self {
            Glyph::CirclePoly { sides, radius } => {
                let sides = sides.max(3);
                let pts = (0..=sides)
                    .map(|i| {
                        let a = TAU * (i % sides) as f64 / sides as f64 - PI / 2.0;
                        [0.5 + radius * a.cos(), 0.5 + radius * a.sin()]
                    })
                    .collect();
                vec![pts]
            }
            Glyph::Cross { arm } => vec![
                vec![[0.5 - arm, 0.5], [0.5 + arm, 0.5]],
                vec![[0.5, 0.5 - arm], [0.5, 0.5 + arm]],
            ],
            Glyph::Arrow { head } => vec![
                vec![[0.2, 0.5], [0.8, 0.5]],
                vec![[0.8 - head, 0.5 - head], [0.8, 0.5], [0.8 - head, 0.5 + head]],
            ],
            Glyph::Bars { count } => {
                let count = count.max(2);
                (0..count)
                    .map(|i| {
                        let x = 0.25 + 0.5 * i as f64 / (count - 1) as f64;
                        let h = 0.15 + 0.5 * (i + 1) as f64 / count as f64;
                        vec![[x, 0.8], [x, 0.8 - h]]
                    })
                    .collect()
            }
            Glyph::Zigzag { teeth } => {
                let n = 2 * teeth.max(1);
                vec![(0..=n)
                    .map(|i| {
                        let y = if i % 2 == 0 { 0.65 } else { 0.35 };
                        [0.2 + 0.6 * i as f64 / n as f64, y]
                    })
                    .collect()]
            }
            Glyph::Grid { cells } => {
                let cells = cells.max(1);
                let mut lines = Vec::new();
                for i in 0..=cells {
                    let t = 0.25 + 0.5 * i as f64 / cells as f64;
                    lines.push(vec![[t, 0.25], [t, 0.75]]);
                    lines.push(vec![[0.25, t], [0.75, t]]);
                }
                lines
            }
            Glyph::Star { points } => {
                let n = 2 * points.max(3);
                vec![(0..=n)
                    .map(|i| {
                        let r = if i % 2 == 0 { 0.32 } else { 0.13 };
                        let a = TAU * (i % n) as f64 / n as f64 - PI / 2.0;
                        [0.5 + r * a.cos(), 0.5 + r * a.sin()]
                    })
                    .collect()]
            }
            Glyph::Spiral { turns } => {
                let n = 40;
                vec![(0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        let a = TAU * turns * t;
                        let r = 0.04 + 0.28 * t;
                        [0.5 + r * a.cos(), 0.5 + r * a.sin()]
                    })
                    .collect()]
            }
            Glyph::Wave { periods } => {
                let n = 32;
                vec![(0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        [0.2 + 0.6 * t, 0.5 + 0.15 * (TAU * periods * t).sin()]
                    })
                    .collect()]
            }
            Glyph::Check => vec![vec![[0.25, 0.55], [0.42, 0.72], [0.78, 0.3]]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagPrototype {
    pub tag: String,
    pub glyph: Glyph,
    /// Multiplier on the per-icon deformation magnitude; 0 disables jitter.
    pub jitter: f64,
}

impl TagPrototype {
    pub fn new(tag: impl Into<String>, glyph: Glyph, jitter: f64) -> Self {
        Self {
            tag: tag.into(),
            glyph,
            jitter,
        }
    }
}

const BASE_GLYPHS: [(&str, Glyph); 15] = [
    ("circle", Glyph::CirclePoly { sides: 24, radius: 0.3 }),
    ("cross", Glyph::Cross { arm: 0.3 }),
    ("arrow", Glyph::Arrow { head: 0.15 }),
    ("bars", Glyph::Bars { count: 4 }),
    ("zigzag", Glyph::Zigzag { teeth: 3 }),
    ("grid", Glyph::Grid { cells: 2 }),
    ("star", Glyph::Star { points: 5 }),
    ("spiral", Glyph::Spiral { turns: 2.0 }),
    ("wave", Glyph::Wave { periods: 1.5 }),
    ("check", Glyph::Check),
    ("triangle", Glyph::CirclePoly { sides: 3, radius: 0.32 }),
    ("square", Glyph::CirclePoly { sides: 4, radius: 0.3 }),
    ("hexagon", Glyph::CirclePoly { sides: 6, radius: 0.3 }),
    ("comb", Glyph::Bars { count: 7 }),
    ("mesh", Glyph::Grid { cells: 4 }),
];

/// The first `count` built-in tags with unit jitter. Beyond the built-in
/// list, recipes repeat with shifted parameters and a numeric suffix.
pub fn default_prototypes(count: usize) -> Vec<TagPrototype> {
    (0..count)
        .map(|i| {
            let (name, glyph) = BASE_GLYPHS[i % BASE_GLYPHS.len()];
            let round = i / BASE_GLYPHS.len();
            if round == 0 {
                return TagPrototype::new(name, glyph, 1.0);
            }
            let glyph = match glyph {
                Glyph::CirclePoly { sides, radius } => Glyph::CirclePoly {
                    sides: sides + round,
                    radius: radius - 0.03 * (round % 3) as f64,
                },
                Glyph::Cross { arm } => Glyph::Cross { arm: arm - 0.04 * (round % 4) as f64 },
                Glyph::Arrow { head } => Glyph::Arrow { head: head - 0.02 * (round % 4) as f64 },
                Glyph::Bars { count } => Glyph::Bars { count: count + round },
                Glyph::Zigzag { teeth } => Glyph::Zigzag { teeth: teeth + round },
                Glyph::Grid { cells } => Glyph::Grid { cells: cells + round },
                Glyph::Star { points } => Glyph::Star { points: points + round },
                Glyph::Spiral { turns } => Glyph::Spiral { turns: turns + 0.5 * round as f64 },
                Glyph::Wave { periods } => Glyph::Wave { periods: periods + round as f64 },
                Glyph::Check => Glyph::Wave { periods: 0.5 + 0.25 * round as f64 },
            };
            TagPrototype::new(format!("{name}-{round}"), glyph, 1.0)
        })
        .collect()
}

/// An icon together with the deformation magnitude it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIcon {
    pub icon: VectorIcon,
    pub jitter: f64,
}

fn tag_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn deform(lines: &[Vec<Point>], m: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
    let angle = rng.random_range(-1.0..=1.0) * MAX_ROTATION_DEG.to_radians() * m;
    let scale = 1.0 + rng.random_range(-1.0..=1.0) * MAX_SCALE_DELTA * m;
    let (s, c) = angle.sin_cos();
    lines
        .iter()
        .map(|line| {
            line.iter()
                .map(|p| {
                    let (x, y) = (p[0] - 0.5, p[1] - 0.5);
                    let nx = rng.random_range(-1.0..=1.0) * MAX_VERTEX_NOISE * m;
                    let ny = rng.random_range(-1.0..=1.0) * MAX_VERTEX_NOISE * m;
                    [
                        (0.5 + scale * (c * x - s * y) + nx).clamp(0.0, 1.0),
                        (0.5 + scale * (s * x + c * y) + ny).clamp(0.0, 1.0),
                    ]
                })
                .collect()
        })
        .collect()
}

/// Short stray marks scattered over the canvas, more of them as `m` grows.
fn clutter(m: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
    let n = (m * MAX_CLUTTER as f64).round() as usize;
    (0..n)
        .map(|_| {
            let c = [rng.random_range(0.06..0.94), rng.random_range(0.06..0.94)];
            let a = rng.random_range(0.0..TAU);
            vec![[c[0] - 0.02 * a.cos(), c[1] - 0.02 * a.sin()], [c[0] + 0.02 * a.cos(), c[1] + 0.02 * a.sin()]]
        })
        .collect()
}

fn to_strokes(lines: Vec<Vec<Point>>, width: f64) -> Vec<Stroke> {
    lines
        .into_iter()
        .filter_map(|mut pts| {
            pts.dedup();
            Stroke::new(pts, width).ok()
        })
        .collect()
}

/// `per_tag` jittered variants of each prototype, with their deformation
/// magnitudes. Each tag draws from its own seeded stream.
pub fn generate_synthetic_icons(
    prototypes: &[TagPrototype],
    per_tag: usize,
    seed: u64,
) -> Result<Vec<SyntheticIcon>> {
    if prototypes.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 prototypes".into()));
    }
    let per_proto = par::map_range(prototypes.len(), |t| {
        let proto = &prototypes[t];
        let base = proto.glyph.polylines();
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(seed, t));
        (0..per_tag)
            .map(|i| {
                let m = rng.random::<f64>() * proto.jitter;
                let width = STROKE_WIDTH * (1.0 - MAX_THINNING * m);
                let mut lines = deform(&base, m, &mut rng);
                lines.extend(clutter(m, &mut rng));
                let mut strokes = to_strokes(lines, width);
                if strokes.is_empty() {
                    strokes = to_strokes(base.clone(), STROKE_WIDTH);
                }
                let icon = VectorIcon::new(format!("{}-{i:03}", proto.tag), vec![proto.tag.clone()], strokes)?;
                Ok(SyntheticIcon { icon, jitter: m })
            })
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(prototypes.len() * per_tag);
    for icons in per_proto {
        out.extend(icons?);
    }
    Ok(out)
}

pub fn generate_icons(prototypes: &[TagPrototype], per_tag: usize, seed: u64) -> Result<Vec<VectorIcon>> {
    Ok(generate_synthetic_icons(prototypes, per_tag, seed)?
        .into_iter()
        .map(|s| s.icon)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingOracle {
    /// Undeformed geometry per tag; deformation is measured against it.
    pub anchors: BTreeMap<String, Vec<Vec<Point>>>,
    /// Semantic-distance levels lost per unit of deformation.
    pub alpha_sd: f64,
    /// Familiarity levels lost per unit of deformation, per tag.
    pub alpha_fam: BTreeMap<String, f64>,
    /// Half-width of the uniform rating noise.
    pub noise: f64,
    /// Extra familiarity penalty for elders on icons past `elder_threshold`.
    pub elder_penalty: f64,
    pub elder_threshold: f64,
    /// Per-cell familiarity shift per unit of deformation, in
    /// [`Demographics::all`] order.
    pub cell_shift: [f64; 9],
    pub seed: u64,
}

impl RatingOracle {
    pub fn new(prototypes: &[TagPrototype], noise: f64, seed: u64) -> Self {
        let anchors = prototypes
            .iter()
            .map(|p| (p.tag.clone(), p.glyph.polylines()))
            .collect();
        let alpha_fam = prototypes
            .iter()
            .enumerate()
            .map(|(i, p)| (p.tag.clone(), 3.4 + 0.6 * (i % 3) as f64))
            .collect();
        let mut cell_shift = [0.0; 9];
        for (i, d) in Demographics::all().iter().enumerate() {
            cell_shift[i] = match d.occupation {
                Occupation::Technology => -0.2,
                Occupation::Business => 0.0,
                Occupation::Other => 0.2,
            } + match d.age_level {
                AgeLevel::Teenager => -0.1,
                AgeLevel::Adult => 0.0,
                AgeLevel::Elder => 0.1,
            };
        }
        Self {
            anchors,
            alpha_sd: 4.0,
            alpha_fam,
            noise,
            elder_penalty: 0.5,
            elder_threshold: 0.5,
            cell_shift,
            seed,
        }
    }

    /// Equal-weight blend of vertex displacement from the tag anchor, stroke
    /// thinning and stray marks, each scaled so full jitter gives about 1.
    /// Displacement falls back to chamfer distance when the topology differs.
    pub fn deformation(&self, icon: &VectorIcon) -> Result<f64> {
        let tag = icon.primary_tag();
        let anchor = self
            .anchors
            .get(tag)
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
        let extra = icon.strokes().len().saturating_sub(anchor.len());
        let strokes = &icon.strokes()[..icon.strokes().len().min(anchor.len())];
        let same_shape = strokes.len() == anchor.len()
            && strokes.iter().zip(anchor).all(|(s, a)| s.points().len() == a.len());
        let mean = if same_shape {
            let (sum, n) = strokes
                .iter()
                .zip(anchor)
                .flat_map(|(s, a)| s.points().iter().zip(a))
                .fold((0.0, 0usize), |(sum, n), (p, q)| {
                    (sum + ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(), n + 1)
                });
            sum / n as f64
        } else {
            let anchor_strokes = to_strokes(anchor.clone(), STROKE_WIDTH);
            if strokes.is_empty() {
                return Ok(f64::INFINITY);
            }
            anchor_strokes
                .iter()
                .map(|a| strokes.iter().map(|s| chamfer_distance(a, s)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / anchor_strokes.len() as f64
        };
        let thinning = strokes.first().map_or(0.0, |s| 1.0 - s.width() / STROKE_WIDTH);
        Ok((mean / DISPLACEMENT_UNIT + thinning / MAX_THINNING + extra as f64 / MAX_CLUTTER as f64) / 3.0)
    }

    /// Uniform noise in `[-noise, noise]`, fixed per (icon, cell, scale) so a
    /// worker asked twice answers the same and identical inputs agree.
    fn noise_for(&self, icon_id: &str, cell: usize, scale: u8) -> f64 {
        if self.noise == 0.0 {
            return 0.0;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in icon_id.bytes().chain([cell as u8, scale]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        rng.random_range(-self.noise..=self.noise)
    }

    fn level(x: f64) -> RatingLevel {
        RatingLevel::new(x.round().clamp(1.0, 5.0) as u8).expect("clamped into range")
    }

    /// `(semantic distance, familiarity)` for one icon and demographic cell.
    /// An icon depicting another concept counts as deformed past recognition.
    pub fn rate(&self, icon: &VectorIcon, tag: &str, demographics: Demographics) -> Result<(RatingLevel, RatingLevel)> {
        let (d, key) = if icon.primary_tag() == tag {
            (self.deformation(icon)?, icon.id.clone())
        } else {
            (FOREIGN_DEFORMATION, format!("{}@{tag}", icon.id))
        };
        let cell = cell_index(demographics);
        let sd = 5.0 - self.alpha_sd * d + self.noise_for(&key, cell, 0);
        let alpha = self.alpha_fam.get(tag).copied().unwrap_or(self.alpha_sd);
        let mut bias = self.cell_shift[cell] * d;
        if demographics.age_level == AgeLevel::Elder && d > self.elder_threshold {
            bias += self.elder_penalty;
        }
        let fam = 5.0 - alpha * d - bias + self.noise_for(&key, cell, 1);
        Ok((Self::level(sd), Self::level(fam)))
    }

    pub fn tag_familiarity(&self, tag: &str, demographics: Demographics) -> RatingLevel {
        let alpha = self.alpha_fam.get(tag).copied().unwrap_or(self.alpha_sd);
        Self::level(5.0 - 2.0 * (alpha - 3.4) - self.cell_shift[cell_index(demographics)])
    }
}

fn cell_index(d: Demographics) -> usize {
    Demographics::all()
        .iter()
        .position(|c| *c == d)
        .expect("every cell is listed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingGenConfig {
    pub workers: usize,
    pub tags_per_worker: usize,
    /// Distinct icons per tag block; one of them is asked twice.
    pub icons_per_block: usize,
    /// How many of those icons are drawn from other tags.
    pub distractors_per_block: usize,
    pub spam_fraction: f64,
    pub seed: u64,
}

impl Default for RatingGenConfig {
    fn default() -> Self {
        Self {
            workers: 100,
            tags_per_worker: 5,
            icons_per_block: 4,
            distractors_per_block: 0,
            spam_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpamKind {
    Uniform,
    Contradictory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRatings {
    pub submissions: Vec<WorkerSubmission>,
    /// Records of the clean workers with the sanity repeat dropped.
    pub records: Vec<RatingRecord>,
    /// Planted spam, by worker id.
    pub spam: BTreeMap<String, SpamKind>,
}

fn age_for(level: AgeLevel, rng: &mut ChaCha8Rng) -> u32 {
    match level {
        AgeLevel::Teenager => rng.random_range(13..20),
        AgeLevel::Adult => rng.random_range(20..=50),
        AgeLevel::Elder => rng.random_range(51..=80),
    }
}

/// Simulated crowd: each worker rates a few tag blocks through the oracle.
/// `round(spam_fraction · workers)` of them are replaced by spam, alternating
/// uniform raters and contradictory sanity answers.
pub fn generate_ratings(
    icons: &[VectorIcon],
    oracle: &RatingOracle,
    config: &RatingGenConfig,
) -> Result<SyntheticRatings> {
    if icons.is_empty() {
        return Err(Error::InvalidArgument("no icons to rate".into()));
    }
    if !(0.0..=1.0).contains(&config.spam_fraction) {
        return Err(Error::InvalidArgument(format!(
            "spam fraction {} outside [0, 1]",
            config.spam_fraction
        )));
    }
    if config.icons_per_block == 0 || config.tags_per_worker == 0 {
        return Err(Error::InvalidArgument("empty rating blocks".into()));
    }
    let mut by_tag: BTreeMap<&str, Vec<&VectorIcon>> = BTreeMap::new();
    for icon in icons {
        by_tag.entry(icon.primary_tag()).or_default().push(icon);
    }
    let tags: Vec<&str> = by_tag.keys().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spam_count = (config.spam_fraction * config.workers as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.workers).collect();
    order.shuffle(&mut rng);
    let mut spam_of = vec![None; config.workers];
    for (n, &w) in order[..spam_count].iter().enumerate() {
        spam_of[w] = Some(if n % 2 == 0 { SpamKind::Uniform } else { SpamKind::Contradictory });
    }

    let results = par::map_range(config.workers, |w| {
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(config.seed, w));
        let worker_id = format!("w{w:04}");
        let demographics = Demographics::all()[rng.random_range(0..9)];
        let reported_age = age_for(demographics.age_level, &mut rng);
        // A clean worker whose answers happen to be all equal would be
        // indistinguishable from a uniform spammer; redraw their blocks.
        for _attempt in 0..32 {
            let sub = draw_submission(&worker_id, reported_age, demographics, &tags, &by_tag, oracle, config, spam_of[w], &mut rng)?;
            if spam_of[w].is_some() || !is_uniform(&sub) {
                return Ok(sub);
            }
        }
        Err(Error::Degenerate(format!("worker {worker_id} only produced uniform ratings")))
    });

    let submissions = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut spam = BTreeMap::new();
    for (sub, kind) in submissions.iter().zip(&spam_of) {
        if let Some(kind) = kind {
            spam.insert(sub.worker_id.clone(), *kind);
            continue;
        }
        for block in &sub.blocks {
            let mut seen = std::collections::BTreeSet::new();
            let mut rows: Vec<&RatingRecord> = block
                .records
                .iter()
                .filter(|r| seen.insert(r.icon_id.clone()))
                .collect();
            rows.sort_by(|a, b| a.icon_id.cmp(&b.icon_id));
            records.extend(rows.into_iter().cloned());
        }
    }
    Ok(SyntheticRatings {
        submissions,
        records,
        spam,
    })
}

fn is_uniform(sub: &WorkerSubmission) -> bool {
    let mut values = sub.records().flat_map(|r| [r.semantic_distance, r.familiarity]);
    match values.next() {
        Some(first) => values.all(|v| v == first),
        None => true,
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_submission(
    worker_id: &str,
    reported_age: u32,
    demographics: Demographics,
    tags: &[&str],
    by_tag: &BTreeMap<&str, Vec<&VectorIcon>>,
    oracle: &RatingOracle,
    config: &RatingGenConfig,
    spam: Option<SpamKind>,
    rng: &mut ChaCha8Rng,
) -> Result<WorkerSubmission> {
    let chosen: Vec<&str> = tags
        .choose_multiple(rng, config.tags_per_worker.min(tags.len()))
        .copied()
        .collect();
    let uniform_level = RatingLevel::new(rng.random_range(1..=5))?;
    let mut blocks = Vec::with_capacity(chosen.len());
    for (b, tag) in chosen.iter().enumerate() {
        let pool = &by_tag[tag];
        let foreign: Vec<&VectorIcon> = tags
            .iter()
            .filter(|t| *t != tag)
            .flat_map(|t| by_tag[t].iter().copied())
            .collect();
        let n_foreign = config.distractors_per_block.min(config.icons_per_block - 1).min(foreign.len());
        let mut picked: Vec<&VectorIcon> = pool
            .choose_multiple(rng, (config.icons_per_block - n_foreign).min(pool.len()))
            .copied()
            .collect();
        picked.extend(foreign.choose_multiple(rng, n_foreign).copied());
        let sanity = picked[rng.random_range(0..picked.len())];
        let tag_fam = oracle.tag_familiarity(tag, demographics);
        let mut asked: Vec<&VectorIcon> = picked.clone();
        asked.push(sanity);
        let mut records = Vec::with_capacity(asked.len());
        for (q, icon) in asked.iter().enumerate() {
            let (sd, fam) = match spam {
                None => oracle.rate(icon, tag, demographics)?,
                Some(SpamKind::Uniform) => (uniform_level, uniform_level),
                Some(SpamKind::Contradictory) => {
                    let is_repeat = q == asked.len() - 1;
                    if b == 0 && (icon.id == sanity.id) {
                        // first answer high, repeat low
                        let v = if is_repeat { 1 } else { 5 };
                        (RatingLevel::new(v)?, RatingLevel::new(v)?)
                    } else {
                        (
                            RatingLevel::new(rng.random_range(1..=5))?,
                            RatingLevel::new(rng.random_range(1..=5))?,
                        )
                    }
                }
            };
            records.push(RatingRecord {
                worker_id: worker_id.to_string(),
                demographics,
                tag: tag.to_string(),
                icon_id: icon.id.clone(),
                semantic_distance: sd,
                familiarity: fam,
                tag_familiarity: tag_fam,
            });
        }
        blocks.push(TagBlock {
            tag: tag.to_string(),
            icons: picked.iter().map(|i| i.id.clone()).collect(),
            sanity_icon: sanity.id.clone(),
            records,
        });
    }
    Ok(WorkerSubmission {
        worker_id: worker_id.to_string(),
        reported_age,
        demographics,
        blocks,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs 2 points".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("constant input has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}
