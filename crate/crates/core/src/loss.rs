//! NDCG-weighted triplet surrogate loss over relaxed hash codes.
//!
//! For a query `q` and a ranking list, every pair `(x_i, x_j)` with
//! `r_j < r_i` contributes
//!
//! ```text
//! w(r_i, r_j) * max(0, d_H(q, x_i) - d_H(q, x_j) + margin)
//! w(r_i, r_j) = (2^r_i - 2^r_j) / Z
//! ```
//!
//! where `d_H(a, b) = (K - a.b) / 2` and `Z` is the ideal DCG of the list.
//! The batch objective adds `alpha/2 * |mean_q h(q)|^2` and
//! `beta/2 * |W|^2`.

use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::metrics;

/// Which ranking `Z` (the NDCG normalizer inside the triplet weight) is
/// computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightNormalization {
    /// Ideal DCG of the sampled list itself, at `p = M`.
    #[default]
    PerList,
    /// Ideal DCG of the query's ground-truth ranking over the whole training
    /// database, at `p = M`.
    PerDatabase,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Hinge margin, in Hamming-distance units.
    pub margin: f64,
    /// Balance penalty strength.
    pub alpha: f64,
    /// Weight decay strength.
    pub beta: f64,
    /// `false` fixes every triplet weight to 1.
    pub weighted: bool,
    pub normalization: WeightNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            alpha: 1.0,
            beta: 5e-4,
            weighted: true,
            normalization: WeightNormalization::PerList,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("margin", self.margin), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `(K - a.b) / 2`; the Hamming distance when both codes are in `{-1, +1}^K`.
pub fn hamming_inner(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "code lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok((a.len() as f64 - dot(a, b)) / 2.0)
}

/// Ideal DCG of `levels` at cutoff `p` (the NDCG normalizer `Z`).
pub fn ndcg_norm(levels: &[u32], p: usize) -> f64 {
    metrics::ideal_dcg(levels, p)
}

/// `(2^r_i - 2^r_j) / Z`, or 1 in unweighted mode.
pub fn triplet_weight(r_i: u32, r_j: u32, z: f64, cfg: &LossConfig) -> Result<f64> {
    if !cfg.weighted {
        return Ok(1.0);
    }
    if r_j >= r_i {
        return Err(Error::InvalidArgument(format!(
            "triplet levels must satisfy r_j < r_i, got r_i={r_i}, r_j={r_j}"
        )));
    }
    if z.is_nan() || z <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "normalization constant must be positive, got {z}"
        )));
    }
    Ok((metrics::gain(r_i) - metrics::gain(r_j)) / z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLossResult {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
    pub active: bool,
}

/// Weighted hinge on one `(query, more similar, less similar)` triplet and
/// its gradients with respect to the three code vectors. At the kink the
/// triplet counts as inactive.
pub fn triplet_loss(
    h_q: &[f64],
    h_i: &[f64],
    h_j: &[f64],
    weight: f64,
    cfg: &LossConfig,
) -> Result<TripletLossResult> {
    if h_i.len() != h_q.len() || h_j.len() != h_q.len() {
        return Err(Error::Shape(format!(
            "triplet code lengths {}/{}/{}",
            h_q.len(),
            h_i.len(),
            h_j.len()
        )));
    }
    let arg = hinge_argument(h_q, h_i, h_j, cfg.margin);
    let k = h_q.len();
    if arg <= 0.0 {
        return Ok(TripletLossResult {
            loss: 0.0,
            grad_query: vec![0.0; k],
            grad_pos: vec![0.0; k],
            grad_neg: vec![0.0; k],
            active: false,
        });
    }
    let half = 0.5 * weight;
    Ok(TripletLossResult {
        loss: weight * arg,
        grad_query: h_j.iter().zip(h_i).map(|(j, i)| half * (j - i)).collect(),
        grad_pos: h_q.iter().map(|q| -half * q).collect(),
        grad_neg: h_q.iter().map(|q| half * q).collect(),
        active: true,
    })
}

/// `d_H(q, i) - d_H(q, j) + margin`, equal to `(q.h_j - q.h_i)/2 + margin`.
pub fn hinge_argument(h_q: &[f64], h_i: &[f64], h_j: &[f64], margin: f64) -> f64 {
    let k = h_q.len() as f64;
    let d_i = (k - dot(h_q, h_i)) / 2.0;
    let d_j = (k - dot(h_q, h_j)) / 2.0;
    d_i - d_j + margin
}

/// One query with its sampled ranking list, as code vectors.
#[derive(Clone, Debug)]
pub struct QueryList<'a> {
    pub query: &'a [f64],
    pub items: Vec<&'a [f64]>,
    pub levels: Vec<u32>,
    /// Normalizer for the triplet weights; ignored in unweighted mode.
    pub z: f64,
}

impl<'a> QueryList<'a> {
    /// `Z` taken from the list's own levels at `p = M`.
    pub fn with_list_norm(query: &'a [f64], items: Vec<&'a [f64]>, levels: Vec<u32>) -> Self {
        let z = ndcg_norm(&levels, levels.len());
        QueryList {
            query,
            items,
            levels,
            z,
        }
    }
}

/// Gradients of a list loss with respect to the query and each list item.
#[derive(Clone, Debug, PartialEq)]
pub struct ListLossResult {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    pub grad_items: Vec<Vec<f64>>,
    pub triplets: usize,
    pub active: usize,
}

/// Sum of weighted triplet losses over every pair with `r_j < r_i`.
pub fn list_loss(list: &QueryList<'_>, cfg: &LossConfig) -> Result<ListLossResult> {
    let k = list.query.len();
    if list.items.len() != list.levels.len() {
        return Err(Error::Shape("list items and levels differ in length".into()));
    }
    let mut out = ListLossResult {
        loss: 0.0,
        grad_query: vec![0.0; k],
        grad_items: vec![vec![0.0; k]; list.items.len()],
        triplets: 0,
        active: 0,
    };
    for (i, &r_i) in list.levels.iter().enumerate() {
        for (j, &r_j) in list.levels.iter().enumerate() {
            if r_j >= r_i {
                continue;
            }
            let w = triplet_weight(r_i, r_j, list.z, cfg)?;
            let t = triplet_loss(list.query, list.items[i], list.items[j], w, cfg)?;
            out.triplets += 1;
            if !t.active {
                continue;
            }
            out.active += 1;
            out.loss += t.loss;
            add_into(&mut out.grad_query, &t.grad_query);
            add_into(&mut out.grad_items[i], &t.grad_pos);
            add_into(&mut out.grad_items[j], &t.grad_neg);
        }
    }
    Ok(out)
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Per-bit mean of the query codes.
pub fn mean_code<R: AsRef<[f64]>>(codes: &[R]) -> Vec<f64> {
    let k = codes.first().map_or(0, |c| c.as_ref().len());
    let mut mean = vec![0.0; k];
    for c in codes {
        add_into(&mut mean, c.as_ref());
    }
    let n = codes.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `alpha/2 * |mean_q h(q)|^2`.
pub fn balance_penalty<R: AsRef<[f64]>>(codes: &[R], alpha: f64) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mean = mean_code(codes);
    0.5 * alpha * dot(&mean, &mean)
}

/// `(alpha / N_q) * mean_q h(q)`: the balance term's gradient with respect
/// to each query code in the batch (the same vector for every query).
pub fn balance_gradient<R: AsRef<[f64]>>(codes: &[R], alpha: f64) -> Vec<f64> {
    if codes.is_empty() {
        return Vec::new();
    }
    let scale = alpha / codes.len() as f64;
    mean_code(codes).into_iter().map(|m| scale * m).collect()
}

/// The terms of the batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub ranking: f64,
    pub balance: f64,
    pub decay: f64,
    pub triplets: usize,
    pub active: usize,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.ranking + self.balance + self.decay
    }

    pub fn active_fraction(&self) -> f64 {
        if self.triplets == 0 {
            0.0
        } else {
            self.active as f64 / self.triplets as f64
        }
    }
}

/// Sum of list losses, plus the balance penalty over the query codes, plus
/// `beta/2` times the squared weight norm.
pub fn objective(lists: &[QueryList<'_>], weight_norm_sq: f64, cfg: &LossConfig) -> Result<ObjectiveValue> {
    if lists.is_empty() {
        return Err(Error::InvalidArgument("objective over an empty batch".into()));
    }
    let mut value = ObjectiveValue {
        ranking: 0.0,
        balance: 0.0,
        decay: 0.5 * cfg.beta * weight_norm_sq,
        triplets: 0,
        active: 0,
    };
    for list in lists {
        let l = list_loss(list, cfg)?;
        value.ranking += l.loss;
        value.triplets += l.triplets;
        value.active += l.active;
    }
    let queries: Vec<&[f64]> = lists.iter().map(|l| l.query).collect();
    value.balance = balance_penalty(&queries, cfg.alpha);
    Ok(value)
}
