//! Crowd rating ingestion: worker validation, mode aggregation, per-tag
//! distributions and seen/unseen tag splits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: usize = 5;
pub const MIN_REPORTED_AGE: u32 = 5;
/// Largest tolerated difference between the two answers of a sanity pair.
pub const SANITY_TOLERANCE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeLevel {
    Teenager,
    Adult,
    Elder,
}

impl AgeLevel {
    pub const ALL: [AgeLevel; 3] = [AgeLevel::Teenager, AgeLevel::Adult, AgeLevel::Elder];

    /// teenager below 20, elder above 50.
    pub fn from_age(years: u32) -> Self {
        match years {
            0..=19 => AgeLevel::Teenager,
            20..=50 => AgeLevel::Adult,
            _ => AgeLevel::Elder,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeLevel::Teenager => "teenager",
            AgeLevel::Adult => "adult",
            AgeLevel::Elder => "elder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occupation {
    Technology,
    Business,
    Other,
}

impl Occupation {
    pub const ALL: [Occupation; 3] = [Occupation::Technology, Occupation::Business, Occupation::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Occupation::Technology => "technology",
            Occupation::Business => "business",
            Occupation::Other => "other",
        }
    }
}

impl std::str::FromStr for AgeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgeLevel::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown age level {s:?}")))
    }
}

impl std::str::FromStr for Occupation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Occupation::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown occupation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Demographics {
    pub age_level: AgeLevel,
    pub occupation: Occupation,
}

impl Demographics {
    pub fn new(age_level: AgeLevel, occupation: Occupation) -> Self {
        Self {
            age_level,
            occupation,
        }
    }

    /// The nine cells, age-major.
    pub fn all() -> [Demographics; 9] {
        let mut out = [Demographics::new(AgeLevel::Teenager, Occupation::Technology); 9];
        for (i, a) in AgeLevel::ALL.into_iter().enumerate() {
            for (j, o) in Occupation::ALL.into_iter().enumerate() {
                out[i * 3 + j] = Demographics::new(a, o);
            }
        }
        out
    }
}

impl fmt::Display for Demographics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.age_level.as_str(), self.occupation.as_str())
    }
}

/// A 1–5 Likert level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RatingLevel(u8);

pub const LEVEL_LABELS: [&str; LEVELS] = ["Very Bad", "Bad", "Neutral", "Good", "Very Good"];

impl RatingLevel {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=5).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!("rating {value} outside 1..=5")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based class index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < LEVELS);
        Self(index as u8 + 1)
    }

    pub fn label(self) -> &'static str {
        LEVEL_LABELS[self.index()]
    }

    pub fn from_label(label: &str) -> Option<Self> {
        LEVEL_LABELS
            .iter()
            .position(|l| *l == label)
            .map(Self::from_index)
    }
}

impl TryFrom<u8> for RatingLevel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        RatingLevel::new(v)
    }
}

impl From<RatingLevel> for u8 {
    fn from(l: RatingLevel) -> u8 {
        l.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub worker_id: String,
    pub demographics: Demographics,
    pub tag: String,
    pub icon_id: String,
    pub semantic_distance: RatingLevel,
    pub familiarity: RatingLevel,
    pub tag_familiarity: RatingLevel,
}

impl RatingRecord {
    fn rating_key(&self) -> (u8, u8, u8) {
        (
            self.semantic_distance.value(),
            self.familiarity.value(),
            self.tag_familiarity.value(),
        )
    }
}

/// One tag's block of work: the assigned icons, the icon shown twice as a
/// sanity check, and every answer received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagBlock {
    pub tag: String,
    pub icons: Vec<String>,
    pub sanity_icon: String,
    pub records: Vec<RatingRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSubmission {
    pub worker_id: String,
    pub reported_age: u32,
    pub demographics: Demographics,
    pub blocks: Vec<TagBlock>,
}

impl WorkerSubmission {
    pub fn records(&self) -> impl Iterator<Item = &RatingRecord> {
        self.blocks.iter().flat_map(|b| b.records.iter())
    }

    pub fn record_count(&self) -> usize {
        self.blocks.iter().map(|b| b.records.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    ContradictorySanityCheck,
    UniformRatings,
    UnratedIcon,
    AgeBelowMinimum,
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectionReason::ContradictorySanityCheck => "contradictory sanity check",
            RejectionReason::UniformRatings => "uniform ratings",
            RejectionReason::UnratedIcon => "unrated icon",
            RejectionReason::AgeBelowMinimum => "age below 5",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Accepted(Vec<RatingRecord>),
    Rejected(RejectionReason),
}

impl Validation {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Validation::Accepted(_))
    }
}

/// Screens a submission. Structural problems are errors; behavioral ones are
/// rejections. Accepted records drop one answer of each sanity pair and come
/// back sorted by icon within each block.
pub fn validate_worker(submission: &WorkerSubmission) -> Result<Validation> {
    let mut unrated = false;
    let mut contradictory = false;
    let mut accepted = Vec::new();

    for block in &submission.blocks {
        if !block.icons.contains(&block.sanity_icon) {
            return Err(Error::Parse(format!(
                "block {:?}: sanity icon {:?} not assigned",
                block.tag, block.sanity_icon
            )));
        }
        let mut by_icon: BTreeMap<&str, Vec<&RatingRecord>> = BTreeMap::new();
        for r in &block.records {
            if r.tag != block.tag || r.worker_id != submission.worker_id {
                return Err(Error::Parse(format!(
                    "record for icon {:?} does not belong to block {:?} of worker {:?}",
                    r.icon_id, block.tag, submission.worker_id
                )));
            }
            if !block.icons.contains(&r.icon_id) {
                return Err(Error::Parse(format!("icon {:?} was not assigned", r.icon_id)));
            }
            by_icon.entry(&r.icon_id).or_default().push(r);
        }
        for icon in &block.icons {
            let expected = if *icon == block.sanity_icon { 2 } else { 1 };
            let got = by_icon.get(icon.as_str()).map_or(0, Vec::len);
            if got > expected {
                return Err(Error::Parse(format!(
                    "icon {icon:?} answered {got} times, expected {expected}"
                )));
            }
            if got < expected {
                unrated = true;
            }
        }
        if let Some(pair) = by_icon.get(block.sanity_icon.as_str()) {
            if pair.len() == 2 {
                let (a, b) = (pair[0], pair[1]);
                let diff = |x: RatingLevel, y: RatingLevel| x.value().abs_diff(y.value());
                if diff(a.semantic_distance, b.semantic_distance) > SANITY_TOLERANCE
                    || diff(a.familiarity, b.familiarity) > SANITY_TOLERANCE
                {
                    contradictory = true;
                }
            }
        }
        for (_, mut rs) in by_icon {
            rs.sort_by_key(|r| r.rating_key());
            accepted.push(rs[0].clone());
        }
    }

    let mut values = submission
        .records()
        .flat_map(|r| [r.semantic_distance, r.familiarity]);
    let uniform = match values.next() {
        Some(first) => values.all(|v| v == first),
        None => false,
    };

    let reason = if unrated {
        Some(RejectionReason::UnratedIcon)
    } else if contradictory {
        Some(RejectionReason::ContradictorySanityCheck)
    } else if uniform {
        Some(RejectionReason::UniformRatings)
    } else if submission.reported_age < MIN_REPORTED_AGE {
        Some(RejectionReason::AgeBelowMinimum)
    } else {
        None
    };
    Ok(match reason {
        Some(r) => Validation::Rejected(r),
        None => Validation::Accepted(accepted),
    })
}

/// Most frequent level; ties go to the lower level.
pub fn aggregate_mode(ratings: &[u8]) -> Result<RatingLevel> {
    if ratings.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty list".into()));
    }
    let mut counts = [0usize; LEVELS];
    for &r in ratings {
        counts[RatingLevel::new(r)?.index()] += 1;
    }
    let mut best = 0;
    for i in 1..LEVELS {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    Ok(RatingLevel::from_index(best))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingDistribution {
    pub tag: String,
    pub count: usize,
    pub semantic_distance: [f64; LEVELS],
    pub familiarity: [f64; LEVELS],
    pub tag_familiarity: [f64; LEVELS],
}

pub fn rating_distribution(records: &[RatingRecord], tag: &str) -> Result<RatingDistribution> {
    let mut sd = [0.0; LEVELS];
    let mut fam = [0.0; LEVELS];
    let mut tf = [0.0; LEVELS];
    let mut count = 0usize;
    for r in records.iter().filter(|r| r.tag == tag) {
        sd[r.semantic_distance.index()] += 1.0;
        fam[r.familiarity.index()] += 1.0;
        tf[r.tag_familiarity.index()] += 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UnknownTag(tag.to_string()));
    }
    for v in sd.iter_mut().chain(&mut fam).chain(&mut tf) {
        *v /= count as f64;
    }
    Ok(RatingDistribution {
        tag: tag.to_string(),
        count,
        semantic_distance: sd,
        familiarity: fam,
        tag_familiarity: tf,
    })
}

/// Seeded shuffle; the first `unseen_count` shuffled tags are held out. Both
/// halves keep the input order.
pub fn split_tags(tags: &[String], unseen_count: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if unseen_count >= tags.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {unseen_count} of {} tags",
            tags.len()
        )));
    }
    let mut order: Vec<usize> = (0..tags.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; tags.len()];
    for &i in &order[..unseen_count] {
        held[i] = true;
    }
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (t, h) in tags.iter().zip(held) {
        if h {
            unseen.push(t.clone());
        } else {
            seen.push(t.clone());
        }
    }
    Ok((seen, unseen))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    worker_id: String,
    age_level: AgeLevel,
    occupation: Occupation,
    tag: String,
    icon_id: String,
    semantic_distance: u8,
    familiarity: u8,
    tag_familiarity: u8,
}

pub fn write_ratings_csv(writer: impl Write, records: &[RatingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(CsvRow {
            worker_id: r.worker_id.clone(),
            age_level: r.demographics.age_level,
            occupation: r.demographics.occupation,
            tag: r.tag.clone(),
            icon_id: r.icon_id.clone(),
            semantic_distance: r.semantic_distance.value(),
            familiarity: r.familiarity.value(),
            tag_familiarity: r.tag_familiarity.value(),
        })?;
    }
    if records.is_empty() {
        w.write_record([
            "worker_id",
            "age_level",
            "occupation",
            "tag",
            "icon_id",
            "semantic_distance",
            "familiarity",
            "tag_familiarity",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ratings_csv(reader: impl Read) -> Result<Vec<RatingRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<CsvRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row?;
            let level = |v: u8| {
                RatingLevel::new(v).map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))
            };
            Ok(RatingRecord {
                demographics: Demographics::new(row.age_level, row.occupation),
                semantic_distance: level(row.semantic_distance)?,
                familiarity: level(row.familiarity)?,
                tag_familiarity: level(row.tag_familiarity)?,
                worker_id: row.worker_id,
                tag: row.tag,
                icon_id: row.icon_id,
            })
        })
        .collect()
}

/// Append-only record store: one writer at a time, readers take immutable
/// snapshots.
#[derive(Debug, Default)]
pub struct RatingStore {
    records: RwLock<Arc<Vec<RatingRecord>>>,
}

impl RatingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, new: impl IntoIterator<Item = RatingRecord>) {
        let mut guard = self.records.write().expect("rating store poisoned");
        Arc::make_mut(&mut guard).extend(new);
    }

    pub fn snapshot(&self) -> Arc<Vec<RatingRecord>> {
        Arc::clone(&self.records.read().expect("rating store poisoned"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lvl(v: u8) -> RatingLevel {
        RatingLevel::new(v).unwrap()
    }

    fn record(icon: &str, sd: u8, fam: u8) -> RatingRecord {
        RatingRecord {
            worker_id: "w".into(),
            demographics: Demographics::new(AgeLevel::Adult, Occupation::Business),
            tag: "search".into(),
            icon_id: icon.into(),
            semantic_distance: lvl(sd),
            familiarity: lvl(fam),
            tag_familiarity: lvl(4),
        }
    }

    fn submission(records: Vec<RatingRecord>, age: u32) -> WorkerSubmission {
        WorkerSubmission {
            worker_id: "w".into(),
            reported_age: age,
            demographics: Demographics::new(AgeLevel::Adult, Occupation::Business),
            blocks: vec![TagBlock {
                tag: "search".into(),
                icons: ["a", "b", "c", "d"].map(String::from).to_vec(),
                sanity_icon: "b".into(),
                records,
            }],
        }
    }

    fn clean() -> Vec<RatingRecord> {
        vec![
            record("a", 4, 3),
            record("b", 2, 2),
            record("c", 5, 4),
            record("d", 3, 3),
            record("b", 3, 2),
        ]
    }

    #[test]
    fn accepts_clean_and_drops_one_sanity_answer() {
        let v = validate_worker(&submission(clean(), 30)).unwrap();
        let Validation::Accepted(recs) = v else {
            panic!("rejected: {v:?}")
        };
        assert_eq!(recs.len(), 4);
        let b: Vec<_> = recs.iter().filter(|r| r.icon_id == "b").collect();
        assert_eq!(b[0].semantic_distance.value(), 2);
    }

    #[test]
    fn rejection_reasons() {
        let mut contradictory = clean();
        contradictory[1] = record("b", 2, 2);
        contradictory[4] = record("b", 5, 2);
        assert_eq!(
            validate_worker(&submission(contradictory, 30)).unwrap(),
            Validation::Rejected(RejectionReason::ContradictorySanityCheck)
        );
        let uniform = ["a", "b", "c", "d", "b"].map(|i| record(i, 3, 3)).to_vec();
        let v = validate_worker(&submission(uniform, 30)).unwrap();
        assert_eq!(v, Validation::Rejected(RejectionReason::UniformRatings));
        assert_eq!(RejectionReason::UniformRatings.to_string(), "uniform ratings");
        assert_eq!(
            validate_worker(&submission(clean(), 4)).unwrap(),
            Validation::Rejected(RejectionReason::AgeBelowMinimum)
        );
        assert_eq!(RejectionReason::AgeBelowMinimum.to_string(), "age below 5");
        let mut missing = clean();
        missing.remove(2);
        assert_eq!(
            validate_worker(&submission(missing, 30)).unwrap(),
            Validation::Rejected(RejectionReason::UnratedIcon)
        );
    }

    #[test]
    fn malformed_submissions_are_errors() {
        let mut extra = clean();
        extra.push(record("z", 3, 3));
        assert!(validate_worker(&submission(extra, 30)).is_err());
        let mut triple = clean();
        triple.push(record("b", 3, 3));
        assert!(validate_worker(&submission(triple, 30)).is_err());
    }

    #[test]
    fn validation_ignores_record_order() {
        let base = validate_worker(&submission(clean(), 30)).unwrap();
        let mut rev = clean();
        rev.reverse();
        assert_eq!(validate_worker(&submission(rev, 30)).unwrap(), base);
    }

    #[test]
    fn mode_examples() {
        assert_eq!(aggregate_mode(&[4, 4, 5]).unwrap().value(), 4);
        assert_eq!(aggregate_mode(&[3, 3, 5, 5]).unwrap().value(), 3);
        assert!(aggregate_mode(&[]).is_err());
        assert!(aggregate_mode(&[6]).is_err());
    }

    #[test]
    fn level_labels_are_a_bijection() {
        for v in 1..=5 {
            let l = lvl(v);
            assert_eq!(RatingLevel::from_label(l.label()), Some(l));
        }
        assert_eq!(lvl(1).label(), "Very Bad");
        assert_eq!(lvl(5).label(), "Very Good");
    }

    #[test]
    fn distribution_examples() {
        let d = rating_distribution(&[record("a", 4, 1)], "search").unwrap();
        assert_eq!(d.semantic_distance, [0.0, 0.0, 0.0, 1.0, 0.0]);
        let d = rating_distribution(&[record("a", 4, 1), record("b", 5, 1)], "search").unwrap();
        assert_eq!(d.semantic_distance, [0.0, 0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(
            rating_distribution(&[record("a", 4, 1)], "print"),
            Err(Error::UnknownTag(_))
        ));
    }

    #[test]
    fn split_examples() {
        let tags: Vec<String> = (0..50).map(|i| format!("tag{i}")).collect();
        let (seen, unseen) = split_tags(&tags, 5, 1).unwrap();
        assert_eq!((seen.len(), unseen.len()), (45, 5));
        assert_eq!(split_tags(&tags, 5, 1).unwrap(), (seen, unseen));
        let (seen, unseen) = split_tags(&tags, 0, 1).unwrap();
        assert_eq!(seen, tags);
        assert!(unseen.is_empty());
        assert!(split_tags(&tags, 50, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = clean();
        let mut buf = Vec::new();
        write_ratings_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "worker_id,age_level,occupation,tag,icon_id,semantic_distance,familiarity,tag_familiarity"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "w,adult,business,search,a,4,3,4");
        assert_eq!(read_ratings_csv(buf.as_slice()).unwrap(), recs);
        let bad = "worker_id,age_level,occupation,tag,icon_id,semantic_distance,familiarity,tag_familiarity\nw,adult,business,s,a,9,3,4\n";
        assert!(read_ratings_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn store_snapshots_are_stable() {
        let store = RatingStore::new();
        store.append(clean());
        let snap = store.snapshot();
        store.append([record("a", 1, 1)]);
        assert_eq!(snap.len(), 5);
        assert_eq!(store.snapshot().len(), 6);
    }

    #[test]
    fn age_buckets() {
        assert_eq!(AgeLevel::from_age(19), AgeLevel::Teenager);
        assert_eq!(AgeLevel::from_age(35), AgeLevel::Adult);
        assert_eq!(AgeLevel::from_age(51), AgeLevel::Elder);
        assert_eq!(Demographics::all().len(), 9);
    }
}
