//! Graded ranking metrics over similarity levels: NDCG@p, ACG@p and the
//! ACG-weighted mean average precision.
//!
//! Queries with no relevant database item (every level zero) have no
//! defined NDCG or weighted AP; they are reported as excluded and left out
//! of every mean.

use std::fmt::Write as _;

use crate::dataset::{similarity_level, LabelSet};
use crate::error::{Error, Result};
use crate::retrieval::{CodeDatabase, PackedCode};

/// `2^r - 1`.
pub fn gain(level: u32) -> f64 {
    2f64.powi(level as i32) - 1.0
}

/// `log2(1 + i)` for 1-based position `i`.
fn discount(position: usize) -> f64 {
    ((position + 1) as f64).log2()
}

/// DCG over the first `p` levels as given.
pub fn dcg_at(levels: &[u32], p: usize) -> f64 {
    levels
        .iter()
        .take(p)
        .enumerate()
        .map(|(i, &r)| gain(r) / discount(i + 1))
        .sum()
}

/// DCG of the best ordering of the same levels.
pub fn ideal_dcg(levels: &[u32], p: usize) -> f64 {
    let mut sorted = levels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    dcg_at(&sorted, p)
}

/// NDCG@p, or `None` when the ideal DCG is zero. `p` is clamped to the list
/// length.
pub fn ndcg_at(levels: &[u32], p: usize) -> Option<f64> {
    let p = p.min(levels.len());
    let z = ideal_dcg(levels, p);
    if z == 0.0 {
        return None;
    }
    Some(dcg_at(levels, p) / z)
}

/// Mean level of the top `p` items; `p` is clamped to the list length.
pub fn acg_at(levels: &[u32], p: usize) -> f64 {
    let p = p.min(levels.len());
    if p == 0 {
        return 0.0;
    }
    levels[..p].iter().map(|&r| r as f64).sum::<f64>() / p as f64
}

/// Sum of ACG@p over relevant positions `p`, divided by the number of
/// relevant items. With `truncation`, only the first `truncation` positions
/// count. `None` when the (truncated) list holds no relevant item.
pub fn average_precision_w(levels: &[u32], truncation: Option<usize>) -> Option<f64> {
    let m = truncation.map_or(levels.len(), |t| t.min(levels.len()));
    let mut running = 0.0;
    let mut total = 0.0;
    let mut relevant = 0usize;
    for (i, &r) in levels[..m].iter().enumerate() {
        running += r as f64;
        if r > 0 {
            relevant += 1;
            total += running / (i + 1) as f64;
        }
    }
    (relevant > 0).then(|| total / relevant as f64)
}

/// Mean over the non-excluded (`Some`) entries, with the excluded count.
pub fn weighted_map(per_query: &[Option<f64>]) -> Result<(f64, usize)> {
    let valid: Vec<f64> = per_query.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::AllExcluded);
    }
    let excluded = per_query.len() - valid.len();
    Ok((valid.iter().sum::<f64>() / valid.len() as f64, excluded))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    /// Evaluate weighted AP over the top `n` results only.
    pub ap_truncation: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoffs: vec![100],
            ap_truncation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cutoffs: Vec<usize>,
    /// Mean NDCG per cutoff.
    pub ndcg: Vec<f64>,
    /// Mean ACG per cutoff.
    pub acg: Vec<f64>,
    pub map_w: f64,
    pub ap_truncation: Option<usize>,
    pub queries: usize,
    pub excluded: usize,
}

impl MetricsReport {
    pub fn ndcg_at(&self, cutoff: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == cutoff).map(|i| self.ndcg[i])
    }

    pub fn acg_at(&self, cutoff: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == cutoff).map(|i| self.acg[i])
    }

    /// `metric@cutoff=value` lines followed by `queries=<n> excluded=<n>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(out, "ndcg@{c}={}", self.ndcg[i]);
        }
        for (i, c) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(out, "acg@{c}={}", self.acg[i]);
        }
        match self.ap_truncation {
            Some(t) => {
                let _ = writeln!(out, "map_w@{t}={}", self.map_w);
            }
            None => {
                let _ = writeln!(out, "map_w@all={}", self.map_w);
            }
        }
        let _ = writeln!(out, "queries={} excluded={}", self.queries, self.excluded);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            message: msg.to_string(),
        };
        let mut report = MetricsReport {
            cutoffs: Vec::new(),
            ndcg: Vec::new(),
            acg: Vec::new(),
            map_w: f64::NAN,
            ap_truncation: None,
            queries: 0,
            excluded: 0,
        };
        let mut acg_cutoffs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix("queries=") {
                let (q, e) = rest
                    .split_once(" excluded=")
                    .ok_or_else(|| bad(lineno, "malformed count line"))?;
                report.queries = q.parse().map_err(|_| bad(lineno, "bad query count"))?;
                report.excluded = e.parse().map_err(|_| bad(lineno, "bad excluded count"))?;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(lineno, "expected metric@cutoff=value"))?;
            let (metric, cutoff) = key
                .split_once('@')
                .ok_or_else(|| bad(lineno, "expected metric@cutoff"))?;
            let value: f64 = value.parse().map_err(|_| bad(lineno, "bad value"))?;
            let parse_cutoff = || cutoff.parse::<usize>().map_err(|_| bad(lineno, "bad cutoff"));
            match metric {
                "ndcg" => {
                    report.cutoffs.push(parse_cutoff()?);
                    report.ndcg.push(value);
                }
                "acg" => {
                    acg_cutoffs.push(parse_cutoff()?);
                    report.acg.push(value);
                }
                "map_w" => {
                    report.map_w = value;
                    report.ap_truncation = if cutoff == "all" { None } else { Some(parse_cutoff()?) };
                }
                _ => return Err(bad(lineno, "unknown metric")),
            }
        }
        if acg_cutoffs != report.cutoffs || report.map_w.is_nan() {
            return Err(bad(0, "incomplete metrics report"));
        }
        Ok(report)
    }
}

/// A coded, labeled query point.
#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub id: u64,
    pub code: PackedCode,
    pub labels: LabelSet,
}

/// Per-query similarity levels in Hamming-ranking order.
pub fn ranked_levels(db: &CodeDatabase, db_labels: &[LabelSet], query: &EvalQuery) -> Result<Vec<u32>> {
    Ok(db
        .rank_positions(&query.code)?
        .into_iter()
        .map(|pos| similarity_level(&query.labels, &db_labels[pos]))
        .collect())
}

/// Ranks the whole database for every query and aggregates the metrics.
/// `db_labels` is aligned with the database's insertion order.
pub fn evaluate_queries(
    db: &CodeDatabase,
    db_labels: &[LabelSet],
    queries: &[EvalQuery],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if db.is_empty() || queries.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs a nonempty database and query set".into(),
        ));
    }
    if db_labels.len() != db.len() {
        return Err(Error::Shape(format!(
            "{} label sets for {} database codes",
            db_labels.len(),
            db.len()
        )));
    }
    if cfg.cutoffs.is_empty() || cfg.cutoffs.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be positive".into()));
    }
    if let Some(q) = queries.iter().find(|q| db.contains_id(q.id)) {
        return Err(Error::IdOverlap(q.id));
    }

    let mut ndcg_sum = vec![0.0; cfg.cutoffs.len()];
    let mut acg_sum = vec![0.0; cfg.cutoffs.len()];
    let mut aps = Vec::with_capacity(queries.len());
    let mut included = 0usize;
    for q in queries {
        let levels = ranked_levels(db, db_labels, q)?;
        if levels.iter().all(|&r| r == 0) {
            aps.push(None);
            continue;
        }
        included += 1;
        for (i, &p) in cfg.cutoffs.iter().enumerate() {
            ndcg_sum[i] += ndcg_at(&levels, p).expect("query has a relevant item");
            acg_sum[i] += acg_at(&levels, p);
        }
        // under truncation a query can have no relevant item in the window;
        // it still counts, with AP 0
        aps.push(Some(average_precision_w(&levels, cfg.ap_truncation).unwrap_or(0.0)));
    }
    let (map_w, excluded) = weighted_map(&aps)?;
    let n = included as f64;
    Ok(MetricsReport {
        cutoffs: cfg.cutoffs.clone(),
        ndcg: ndcg_sum.into_iter().map(|s| s / n).collect(),
        acg: acg_sum.into_iter().map(|s| s / n).collect(),
        map_w,
        ap_truncation: cfg.ap_truncation,
        queries: queries.len(),
        excluded,
    })
}
