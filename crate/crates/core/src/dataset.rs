//! Multi-label feature datasets, semantic similarity levels, ground-truth
//! rankings and the stratified triplet sampler used during training.
//!
//! The on-disk text format is
//!
//! ```text
//! #dsrh-features v1 dim=<D> labels=<C>
//! <id>\t<label;label;...>\t<f1,f2,...,fD>
//! ```
//!
//! Labels are 1-based integers in `1..=C`. Any other line starting with `#`
//! is a comment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

const HEADER_TAG: &str = "#dsrh-features";
const HEADER_VERSION: &str = "v1";

/// A subset of the label universe `1..=C`, stored as a bit vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSet {
    words: Vec<u64>,
    universe: usize,
}

impl LabelSet {
    pub fn empty(universe: usize) -> Self {
        LabelSet {
            words: vec![0; universe.div_ceil(64)],
            universe,
        }
    }

    pub fn from_labels(universe: usize, labels: &[u32]) -> Result<Self> {
        let mut set = LabelSet::empty(universe);
        for &label in labels {
            set.insert(label)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, label: u32) -> Result<()> {
        let label = label as usize;
        if label == 0 || label > self.universe {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside 1..={}",
                self.universe
            )));
        }
        let bit = label - 1;
        self.words[bit / 64] |= 1 << (bit % 64);
        Ok(())
    }

    pub fn contains(&self, label: u32) -> bool {
        let label = label as usize;
        if label == 0 || label > self.universe {
            return false;
        }
        let bit = label - 1;
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Labels in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (1..=self.universe as u32).filter(move |&l| self.contains(l))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    pub id: u64,
    pub features: Vec<f64>,
    pub labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelDataset {
    pub points: Vec<DataPoint>,
    pub dim: usize,
    pub label_count: usize,
}

impl MultiLabelDataset {
    /// Builds a dataset, checking the invariants the loader enforces.
    pub fn new(points: Vec<DataPoint>, dim: usize, label_count: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if p.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.features.len(),
                });
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("features"));
            }
            if p.labels.universe() != label_count {
                return Err(Error::InvalidArgument(format!(
                    "point {} has a label universe of {}, expected {label_count}",
                    p.id,
                    p.labels.universe()
                )));
            }
            if p.labels.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "point {} has an empty label set",
                    p.id
                )));
            }
            if !seen.insert(p.id) {
                return Err(Error::DuplicateId { id: p.id });
            }
        }
        Ok(MultiLabelDataset {
            points,
            dim,
            label_count,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset by position, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> MultiLabelDataset {
        MultiLabelDataset {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            dim: self.dim,
            label_count: self.label_count,
        }
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.points.iter().map(|p| p.features.as_slice()).collect()
    }

    /// Serializes in the dataset text format. `f64` values use the shortest
    /// representation that round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{HEADER_TAG} {HEADER_VERSION} dim={} labels={}",
            self.dim, self.label_count
        );
        for p in &self.points {
            let labels: Vec<String> = p.labels.iter().map(|l| l.to_string()).collect();
            let feats: Vec<String> = p.features.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}\t{}\t{}", p.id, labels.join(";"), feats.join(","));
        }
        out
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MultiLabelDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(file)
}

pub fn parse_dataset(reader: impl Read) -> Result<MultiLabelDataset> {
    let reader = BufReader::new(reader);
    let mut header: Option<(usize, usize)> = None;
    let mut points = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.starts_with('#') {
            if header.is_none() {
                header = Some(parse_header(&line, lineno)?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (dim, label_count) = header.ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("record before the `{HEADER_TAG}` header"),
        })?;
        let point = parse_record(&line, lineno, dim, label_count)?;
        if !seen.insert(point.id) {
            return Err(Error::DuplicateId { id: point.id });
        }
        points.push(point);
    }

    let (dim, label_count) = header.ok_or_else(|| Error::Parse {
        line: 0,
        message: format!("missing `{HEADER_TAG}` header"),
    })?;
    Ok(MultiLabelDataset {
        points,
        dim,
        label_count,
    })
}

fn parse_header(line: &str, lineno: usize) -> Result<(usize, usize)> {
    let bad = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(bad(format!("expected `{HEADER_TAG}` header")));
    }
    if parts.next() != Some(HEADER_VERSION) {
        return Err(bad("unsupported dataset version".into()));
    }
    let mut dim = None;
    let mut labels = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field `{part}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| bad(format!("malformed header value `{part}`")))?;
        match key {
            "dim" => dim = Some(value),
            "labels" => labels = Some(value),
            _ => return Err(bad(format!("unknown header field `{key}`"))),
        }
    }
    match (dim, labels) {
        (Some(d), Some(c)) if d > 0 && c > 0 => Ok((d, c)),
        _ => Err(bad("header needs positive dim= and labels=".into())),
    }
}

fn parse_record(line: &str, lineno: usize, dim: usize, label_count: usize) -> Result<DataPoint> {
    let bad = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
    }
    let id: u64 = fields[0]
        .trim()
        .parse()
        .map_err(|_| bad(format!("invalid id `{}`", fields[0])))?;

    let label_field = fields[1].trim();
    if label_field.is_empty() {
        return Err(Error::EmptyLabelSet { line: lineno });
    }
    let mut labels = LabelSet::empty(label_count);
    for tok in label_field.split(';') {
        let label: u32 = tok
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid label `{tok}`")))?;
        labels
            .insert(label)
            .map_err(|_| bad(format!("label {label} outside 1..={label_count}")))?;
    }

    let features = fields[2]
        .split(',')
        .map(|tok| {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| bad(format!("invalid feature `{tok}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("non-finite feature `{tok}`")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    if features.len() != dim {
        return Err(Error::DimensionMismatchAt {
            line: lineno,
            expected: dim,
            found: features.len(),
        });
    }
    Ok(DataPoint {
        id,
        features,
        labels,
    })
}

/// Number of labels shared by two points.
pub fn similarity_level(a: &LabelSet, b: &LabelSet) -> u32 {
    a.intersection_len(b) as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankedPoint {
    pub id: u64,
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthRanking {
    pub query_id: u64,
    pub entries: Vec<RankedPoint>,
}

impl GroundTruthRanking {
    pub fn levels(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.level).collect()
    }
}

/// Database points sorted by similarity level (descending), ties by
/// ascending id, truncated to `max_len`. The query itself is excluded by id.
pub fn build_ranking_list(
    query: &DataPoint,
    db: &MultiLabelDataset,
    max_len: usize,
) -> GroundTruthRanking {
    let mut entries: Vec<RankedPoint> = db
        .points
        .iter()
        .filter(|p| p.id != query.id)
        .map(|p| RankedPoint {
            id: p.id,
            level: similarity_level(&query.labels, &p.labels),
        })
        .collect();
    entries.sort_unstable_by(|a, b| b.level.cmp(&a.level).then(a.id.cmp(&b.id)));
    entries.truncate(max_len);
    GroundTruthRanking {
        query_id: query.id,
        entries,
    }
}

/// The three similarity strata a training list draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stratum {
    /// Shares every query label.
    FullMatch,
    /// Shares at least one, but not every, query label.
    Partial,
    /// Shares no label.
    Disjoint,
}

/// One sampled database point: its position in the database and its level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ListItem {
    pub index: usize,
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ListSample {
    Sampled(Vec<ListItem>),
    Skip(Stratum),
}

impl ListSample {
    pub fn items(&self) -> Option<&[ListItem]> {
        match self {
            ListSample::Sampled(items) => Some(items),
            ListSample::Skip(_) => None,
        }
    }
}

/// Samples `[full-match, partial, disjoint]`, one point uniformly from each
/// stratum. Returns [`ListSample::Skip`] naming the first empty stratum.
pub fn sample_triplet_list<R: Rng + ?Sized>(
    query: &DataPoint,
    db: &MultiLabelDataset,
    rng: &mut R,
) -> ListSample {
    sample_ranking_list(query, db, 3, rng)
}

/// Like [`sample_triplet_list`] but for lists of `len >= 3`: the three
/// stratified items come first, followed by `len - 3` further distinct points
/// drawn uniformly from the rest of the database.
pub fn sample_ranking_list<R: Rng + ?Sized>(
    query: &DataPoint,
    db: &MultiLabelDataset,
    len: usize,
    rng: &mut R,
) -> ListSample {
    assert!(len >= 3, "ranking lists need at least the three strata");
    let full = query.labels.len() as u32;
    let mut strata: [Vec<ListItem>; 3] = Default::default();
    for (index, p) in db.points.iter().enumerate() {
        if p.id == query.id {
            continue;
        }
        let level = similarity_level(&query.labels, &p.labels);
        let slot = if level == full {
            0
        } else if level == 0 {
            2
        } else {
            1
        };
        strata[slot].push(ListItem { index, level });
    }
    for (slot, stratum) in [Stratum::FullMatch, Stratum::Partial, Stratum::Disjoint]
        .into_iter()
        .enumerate()
    {
        if strata[slot].is_empty() {
            return ListSample::Skip(stratum);
        }
    }
    let mut items: Vec<ListItem> = strata
        .iter()
        .map(|s| s[rng.gen_range(0..s.len())])
        .collect();

    if len > 3 {
        let mut rest: Vec<ListItem> = strata
            .into_iter()
            .flatten()
            .filter(|c| !items.iter().any(|i| i.index == c.index))
            .collect();
        rest.sort_unstable_by_key(|c| c.index);
        let extra = (len - 3).min(rest.len());
        let (chosen, _) = rest.partial_shuffle(rng, extra);
        items.extend_from_slice(chosen);
    }
    ListSample::Sampled(items)
}

/// Every ordered pair `(i, j)` of list positions with `level_j < level_i`.
pub fn list_triplets(items: &[ListItem]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, a) in items.iter().enumerate() {
        for (j, b) in items.iter().enumerate() {
            if b.level < a.level {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Random disjoint split into `(queries, database)`; both halves keep the
/// original point order.
pub fn split_train_query<R: Rng + ?Sized>(
    ds: &MultiLabelDataset,
    query_count: usize,
    rng: &mut R,
) -> Result<(MultiLabelDataset, MultiLabelDataset)> {
    if query_count >= ds.len() {
        return Err(Error::InvalidArgument(format!(
            "query count {query_count} must be smaller than the dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let mut queries = order[..query_count].to_vec();
    let mut database = order[query_count..].to_vec();
    queries.sort_unstable();
    database.sort_unstable();
    Ok((ds.select(&queries), ds.select(&database)))
}
