//! Stroke-based icon geometry, deterministic rasterization and stroke diffing.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Chamfer distance (unit-square units) under which two strokes match.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.05;
/// Points sampled along each stroke for Chamfer matching.
pub const CHAMFER_SAMPLES: usize = 16;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStroke")]
pub struct Stroke {
    points: Vec<Point>,
    width: f64,
}

#[derive(Deserialize)]
struct RawStroke {
    points: Vec<Point>,
    width: f64,
}

impl TryFrom<RawStroke> for Stroke {
    type Error = Error;

    fn try_from(raw: RawStroke) -> Result<Self> {
        Stroke::new(raw.points, raw.width)
    }
}

impl Stroke {
    pub fn new(points: Vec<Point>, width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= 0.5) {
            return Err(Error::InvalidIcon(format!(
                "stroke width {width} outside (0, 0.5]"
            )));
        }
        if points.len() < 2 {
            return Err(Error::InvalidIcon("stroke needs at least 2 points".into()));
        }
        for p in &points {
            if !p.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidIcon(format!(
                    "point ({}, {}) outside the unit square",
                    p[0], p[1]
                )));
            }
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidIcon("consecutive duplicate points".into()));
        }
        Ok(Self { points, width })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// `n` points spaced uniformly by arc length, endpoints included.
    pub fn resample(&self, n: usize) -> Vec<Point> {
        let total = self.length();
        if n == 1 {
            return vec![self.points[0]];
        }
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        let mut seg_start = 0.0;
        for i in 0..n {
            let target = total * i as f64 / (n - 1) as f64;
            while seg + 1 < self.points.len() - 1
                && seg_start + dist(self.points[seg], self.points[seg + 1]) < target
            {
                seg_start += dist(self.points[seg], self.points[seg + 1]);
                seg += 1;
            }
            let (a, b) = (self.points[seg], self.points[seg + 1]);
            let len = dist(a, b);
            let t = if len > 0.0 {
                ((target - seg_start) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        out
    }

    /// Shortest distance from `p` to the polyline.
    pub fn distance_to(&self, p: Point) -> f64 {
        self.points
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIcon")]
pub struct VectorIcon {
    pub id: String,
    tags: Vec<String>,
    strokes: Vec<Stroke>,
}

#[derive(Deserialize)]
struct RawIcon {
    id: String,
    tags: Vec<String>,
    #[serde(default)]
    strokes: Vec<Stroke>,
}

impl TryFrom<RawIcon> for VectorIcon {
    type Error = Error;

    fn try_from(raw: RawIcon) -> Result<Self> {
        VectorIcon::new(raw.id, raw.tags, raw.strokes)
    }
}

impl VectorIcon {
    /// Tags are trimmed and lowercased.
    pub fn new(id: impl Into<String>, tags: Vec<String>, strokes: Vec<Stroke>) -> Result<Self> {
        let tags = normalize_tags(tags)?;
        Ok(Self {
            id: id.into(),
            tags,
            strokes,
        })
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn strokes(&self) -> &[Stroke] {
        &self.strokes
    }

    pub fn primary_tag(&self) -> &str {
        &self.tags[0]
    }

    pub fn with_strokes(&self, strokes: Vec<Stroke>) -> Self {
        Self {
            id: self.id.clone(),
            tags: self.tags.clone(),
            strokes,
        }
    }

    pub fn with_tags(&self, tags: Vec<String>) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            tags: normalize_tags(tags)?,
            strokes: self.strokes.clone(),
        })
    }
}

fn normalize_tags(tags: Vec<String>) -> Result<Vec<String>> {
    if tags.is_empty() {
        return Err(Error::InvalidIcon("icon needs at least one tag".into()));
    }
    tags.into_iter()
        .map(|t| {
            let t = t.trim().to_lowercase();
            if t.is_empty() {
                Err(Error::InvalidIcon("empty tag".into()))
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayscaleImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayscaleImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self {
            pixels,
            ..self.clone()
        }
    }
}

/// Strokes the add/remove hints for bringing `current` closer to a reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditSuggestion {
    pub add: Vec<Stroke>,
    pub remove: Vec<usize>,
}

impl EditSuggestion {
    pub fn is_empty(&self) -> bool {
        self.add.is_empty() && self.remove.is_empty()
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Renders `icon` at `resolution`×`resolution` with 2×2 binary supersampling.
pub fn rasterize(icon: &VectorIcon, resolution: usize) -> Result<GrayscaleImage> {
    if resolution < 4 {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} below 4"
        )));
    }
    let mut img = GrayscaleImage::zeros(resolution, resolution);
    if icon.strokes.is_empty() {
        return Ok(img);
    }
    // subsample centers sit at 1/4 and 3/4 of each pixel: (4i + 1 + 2s) / 4n
    let denom = 4.0 * resolution as f64;
    let coord = |i: usize, s: usize| (4 * i + 1 + 2 * s) as f64 / denom;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut covered = 0u32;
            for sy in 0..2 {
                for sx in 0..2 {
                    let p = [coord(x, sx), coord(y, sy)];
                    if icon
                        .strokes
                        .iter()
                        .any(|s| s.distance_to(p) <= s.width / 2.0)
                    {
                        covered += 1;
                    }
                }
            }
            img.pixels[y * resolution + x] = covered as f64 / 4.0;
        }
    }
    Ok(img)
}

/// Crops to the nonzero bounding box, pads to a centered square and
/// area-averages down (or up) to `size`×`size`.
pub fn normalize_image(img: &GrayscaleImage, size: usize) -> Result<GrayscaleImage> {
    if img.width == 0 || img.height == 0 || size == 0 {
        return Err(Error::InvalidImage("degenerate image dimensions".into()));
    }
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(x, y) > 0.0 {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let Some((x0, y0, x1, y1)) = bbox else {
        return Ok(GrayscaleImage::zeros(size, size));
    };
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let side = w.max(h);
    let (ox, oy) = ((side - w) as f64 / 2.0, (side - h) as f64 / 2.0);

    // Square canvas of `side` units with the crop offset by (ox, oy); the
    // offset may be half a pixel, so sample the crop as a piecewise-constant
    // function and integrate over each output cell.
    let scale = side as f64 / size as f64;
    let mut out = vec![0.0; size * size];
    for oyi in 0..size {
        let (ty0, ty1) = (oyi as f64 * scale - oy, (oyi + 1) as f64 * scale - oy);
        for oxi in 0..size {
            let (tx0, tx1) = (oxi as f64 * scale - ox, (oxi + 1) as f64 * scale - ox);
            let mut acc = 0.0;
            let sy_lo = ty0.floor().max(0.0) as usize;
            let sy_hi = (ty1.ceil().min(h as f64)).max(0.0) as usize;
            let sx_lo = tx0.floor().max(0.0) as usize;
            let sx_hi = (tx1.ceil().min(w as f64)).max(0.0) as usize;
            for sy in sy_lo..sy_hi {
                let cy = overlap(ty0, ty1, sy as f64, sy as f64 + 1.0);
                if cy <= 0.0 {
                    continue;
                }
                for sx in sx_lo..sx_hi {
                    let cx = overlap(tx0, tx1, sx as f64, sx as f64 + 1.0);
                    if cx > 0.0 {
                        acc += cx * cy * img.get(x0 + sx, y0 + sy);
                    }
                }
            }
            out[oyi * size + oxi] = (acc / (scale * scale)).clamp(0.0, 1.0);
        }
    }
    GrayscaleImage::new(size, size, out)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Symmetric Chamfer distance between two strokes over uniform arc-length samples.
pub fn chamfer_distance(a: &Stroke, b: &Stroke) -> f64 {
    let pa = a.resample(CHAMFER_SAMPLES);
    let pb = b.resample(CHAMFER_SAMPLES);
    let one_way = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (one_way(&pa, &pb) + one_way(&pb, &pa))
}

pub fn diff_strokes(current: &VectorIcon, reference: &VectorIcon) -> EditSuggestion {
    diff_strokes_with_threshold(current, reference, DEFAULT_MATCH_THRESHOLD)
}

/// Greedy one-to-one stroke matching in ascending Chamfer distance.
pub fn diff_strokes_with_threshold(
    current: &VectorIcon,
    reference: &VectorIcon,
    threshold: f64,
) -> EditSuggestion {
    let mut pairs = Vec::new();
    for (i, c) in current.strokes.iter().enumerate() {
        for (j, r) in reference.strokes.iter().enumerate() {
            let d = chamfer_distance(c, r);
            if d <= threshold {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cur_used = vec![false; current.strokes.len()];
    let mut ref_used = vec![false; reference.strokes.len()];
    for (_, i, j) in pairs {
        if !cur_used[i] && !ref_used[j] {
            cur_used[i] = true;
            ref_used[j] = true;
        }
    }
    EditSuggestion {
        add: reference
            .strokes
            .iter()
            .zip(&ref_used)
            .filter(|(_, used)| !**used)
            .map(|(s, _)| s.clone())
            .collect(),
        remove: (0..current.strokes.len()).filter(|&i| !cur_used[i]).collect(),
    }
}

/// Reads the one-icon-per-line JSON format; blank lines are skipped.
pub fn read_icons(reader: impl BufRead) -> Result<Vec<VectorIcon>> {
    let mut icons = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let icon: VectorIcon = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        icons.push(icon);
    }
    Ok(icons)
}

pub fn write_icons(mut writer: impl Write, icons: &[VectorIcon]) -> Result<()> {
    for icon in icons {
        serde_json::to_writer(&mut writer, icon)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
