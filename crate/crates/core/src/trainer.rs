//! Mini-batch SGD with momentum over sampled ranking lists.
//!
//! Each step draws `batch_size` queries (without replacement within an
//! epoch), samples a ranking list for each, forwards the queries and list
//! items as one batch, turns the list losses and the balance penalty into
//! per-code gradients, backpropagates and applies
//!
//! ```text
//! v <- momentum * v - lr * (grad + beta * w)
//! w <- w + v
//! ```
//!
//! with weight decay on weight matrices only.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{build_ranking_list, sample_ranking_list, ListItem, ListSample, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, ObjectiveValue, QueryList, WeightNormalization};
use crate::matrix::Matrix;
use crate::metrics::{self, EvalConfig, EvalQuery, MetricsReport};
use crate::model::{DropoutMask, HashModel, ParamKind, ParameterGradients};
use crate::retrieval::{encode_dataset, CodeDatabase};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub dropout_keep: f64,
    pub list_length: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            loss: LossConfig::default(),
            dropout_keep: 0.5,
            list_length: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return fail(format!("dropout keep probability {} outside (0, 1]", self.dropout_keep));
        }
        if self.list_length < 3 {
            return fail(format!(
                "list length {} is below 3 (one item per similarity stratum)",
                self.list_length
            ));
        }
        self.loss.validate()
    }
}

/// One sampled list: the query's and items' positions in the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledList {
    pub query: usize,
    pub items: Vec<ListItem>,
    /// NDCG normalizer for this list's triplet weights.
    pub z: f64,
}

/// Objective and parameter gradients of one batch. The gradient covers the
/// ranking loss and the balance penalty; weight decay is applied by
/// [`sgd_step`].
pub fn batch_gradients(
    model: &HashModel,
    features: &[&[f64]],
    lists: &[SampledList],
    cfg: &LossConfig,
    mask: Option<&DropoutMask>,
) -> Result<(ObjectiveValue, ParameterGradients)> {
    let (value, trace, code_grads) = batch_forward(model, features, lists, cfg, mask, true)?;
    let grads = model.backward(&trace, &code_grads.expect("requested"))?;
    Ok((value, grads))
}

/// Objective of one batch without gradients.
pub fn batch_objective(
    model: &HashModel,
    features: &[&[f64]],
    lists: &[SampledList],
    cfg: &LossConfig,
    mask: Option<&DropoutMask>,
) -> Result<ObjectiveValue> {
    Ok(batch_forward(model, features, lists, cfg, mask, false)?.0)
}

/// Rows of the forward batch: per list, the query followed by its items.
pub fn batch_rows<'a>(features: &[&'a [f64]], lists: &[SampledList]) -> Vec<&'a [f64]> {
    let mut rows = Vec::new();
    for l in lists {
        rows.push(features[l.query]);
        rows.extend(l.items.iter().map(|it| features[it.index]));
    }
    rows
}

fn batch_forward(
    model: &HashModel,
    features: &[&[f64]],
    lists: &[SampledList],
    cfg: &LossConfig,
    mask: Option<&DropoutMask>,
    want_grads: bool,
) -> Result<(ObjectiveValue, crate::model::ForwardTrace, Option<Matrix>)> {
    if lists.is_empty() {
        return Err(Error::InvalidArgument("objective over an empty batch".into()));
    }
    let rows = batch_rows(features, lists);
    let (codes, trace) = model.forward_relaxed(&rows, mask)?;

    let mut query_rows = Vec::with_capacity(lists.len());
    let mut qlists = Vec::with_capacity(lists.len());
    let mut row = 0;
    for l in lists {
        query_rows.push(row);
        qlists.push(QueryList {
            query: codes.row(row),
            items: (0..l.items.len()).map(|i| codes.row(row + 1 + i)).collect(),
            levels: l.items.iter().map(|it| it.level).collect(),
            z: l.z,
        });
        row += 1 + l.items.len();
    }
    let value = loss::objective(&qlists, model.weight_norm_sq(), cfg)?;
    if !want_grads {
        return Ok((value, trace, None));
    }

    let mut code_grads = Matrix::zeros(codes.rows(), codes.cols());
    for (ql, &qrow) in qlists.iter().zip(&query_rows) {
        let res = loss::list_loss(ql, cfg)?;
        add_row(&mut code_grads, qrow, &res.grad_query);
        for (i, g) in res.grad_items.iter().enumerate() {
            add_row(&mut code_grads, qrow + 1 + i, g);
        }
    }
    let query_codes: Vec<&[f64]> = qlists.iter().map(|l| l.query).collect();
    let balance = loss::balance_gradient(&query_codes, cfg.alpha);
    for &qrow in &query_rows {
        add_row(&mut code_grads, qrow, &balance);
    }
    Ok((value, trace, Some(code_grads)))
}

fn add_row(m: &mut Matrix, r: usize, v: &[f64]) {
    for (a, b) in m.row_mut(r).iter_mut().zip(v) {
        *a += b;
    }
}

/// Momentum buffers mirroring the model's parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(model: &HashModel) -> Self {
        OptimizerState {
            velocity: model.params().iter().map(|(t, _)| vec![0.0; t.len()]).collect(),
            steps: 0,
        }
    }
}

pub fn sgd_step(
    model: &mut HashModel,
    grads: &ParameterGradients,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    beta: f64,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut params = model.params_mut();
    if grad_tensors.len() != params.len()
        || opt.velocity.len() != params.len()
        || params
            .iter()
            .zip(&grad_tensors)
            .zip(&opt.velocity)
            .any(|(((p, _), g), v)| p.len() != g.len() || p.len() != v.len())
    {
        return Err(Error::Shape("gradients or optimizer state do not match the model".into()));
    }
    for (((w, kind), g), v) in params.iter_mut().zip(grad_tensors).zip(&mut opt.velocity) {
        let decay = if *kind == ParamKind::Weight { beta } else { 0.0 };
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi - lr * (gi + decay * *wi);
            *wi += *vi;
        }
    }
    opt.steps += 1;
    Ok(())
}

/// One progress record, emitted after every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub objective: f64,
    pub active_fraction: f64,
    pub skipped: usize,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} step={} obj={} active={} skipped={}",
            self.epoch, self.step, self.objective, self.active_fraction, self.skipped
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_objective: f64,
    pub active_fraction: f64,
    pub skipped: usize,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// One line per epoch. Wall time is left out so that the text is a
    /// deterministic function of the run's inputs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "epoch={} mean_obj={} active={} skipped={}",
                e.epoch, e.mean_objective, e.active_fraction, e.skipped
            );
        }
        out
    }
}

/// RNG for everything that happens during training, independent of the
/// stream used for weight initialization.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn train(
    model: HashModel,
    train_set: &MultiLabelDataset,
    cfg: &TrainConfig,
) -> Result<(HashModel, TrainReport)> {
    train_with_progress(model, train_set, cfg, |_| {})
}

pub fn train_with_progress(
    mut model: HashModel,
    train_set: &MultiLabelDataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&StepRecord),
) -> Result<(HashModel, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if model.input_dim() != train_set.dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: train_set.dim,
        });
    }

    let mut rng = training_rng(cfg.seed);
    let features = train_set.features();
    let mut opt = OptimizerState::new(&model);
    let mut report = TrainReport::default();
    let mut db_norms: Vec<Option<f64>> = vec![None; train_set.len()];

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut objective_sum = 0.0;
        let mut updates = 0usize;
        let (mut triplets, mut active) = (0usize, 0usize);
        let mut skipped_epoch = 0usize;

        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut lists = Vec::with_capacity(chunk.len());
            let mut skipped = 0;
            for &q in chunk {
                let query = &train_set.points[q];
                match sample_ranking_list(query, train_set, cfg.list_length, &mut rng) {
                    ListSample::Skip(_) => skipped += 1,
                    ListSample::Sampled(items) => {
                        let levels: Vec<u32> = items.iter().map(|it| it.level).collect();
                        let z = match cfg.loss.normalization {
                            WeightNormalization::PerList => loss::ndcg_norm(&levels, levels.len()),
                            WeightNormalization::PerDatabase => *db_norms[q].get_or_insert_with(|| {
                                let ranking = build_ranking_list(query, train_set, cfg.list_length);
                                metrics::ideal_dcg(&ranking.levels(), cfg.list_length)
                            }),
                        };
                        lists.push(SampledList { query: q, items, z });
                    }
                }
            }
            skipped_epoch += skipped;
            if lists.is_empty() {
                progress(&StepRecord {
                    epoch,
                    step: s + 1,
                    objective: 0.0,
                    active_fraction: 0.0,
                    skipped,
                });
                continue;
            }
            let rows = lists.iter().map(|l| 1 + l.items.len()).sum();
            let mask = if cfg.dropout_keep < 1.0 {
                Some(DropoutMask::sample(&model, rows, cfg.dropout_keep, &mut rng)?)
            } else {
                None
            };
            let (value, grads) = batch_gradients(&model, &features, &lists, &cfg.loss, mask.as_ref())?;
            sgd_step(
                &mut model,
                &grads,
                &mut opt,
                cfg.learning_rate,
                cfg.momentum,
                cfg.loss.beta,
            )?;
            if model.params().iter().any(|(t, _)| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite("model weights after an update (diverged)"));
            }
            objective_sum += value.total();
            updates += 1;
            triplets += value.triplets;
            active += value.active;
            progress(&StepRecord {
                epoch,
                step: s + 1,
                objective: value.total(),
                active_fraction: value.active_fraction(),
                skipped,
            });
        }
        if updates == 0 {
            return Err(Error::DegenerateDataset { epoch });
        }
        report.epochs.push(EpochStats {
            epoch,
            mean_objective: objective_sum / updates as f64,
            active_fraction: if triplets == 0 { 0.0 } else { active as f64 / triplets as f64 },
            skipped: skipped_epoch,
            wall_ms: started.elapsed().as_millis(),
        });
    }
    Ok((model, report))
}

/// Mean over bits of `|mean_n h_k(x_n)|`, the relaxed per-bit activation
/// averaged over a dataset (no dropout).
pub fn mean_abs_bit_activation(model: &HashModel, ds: &MultiLabelDataset) -> Result<f64> {
    let (codes, _) = model.forward_relaxed(&ds.features(), None)?;
    let means = codes.column_sums();
    let n = codes.rows() as f64;
    Ok(means.iter().map(|s| (s / n).abs()).sum::<f64>() / means.len() as f64)
}

/// Encodes queries and database with binary codes and evaluates the Hamming
/// rankings.
pub fn evaluate(
    model: &HashModel,
    queries: &MultiLabelDataset,
    db: &MultiLabelDataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("query set is empty".into()));
    }
    let db_codes = encode_dataset(model, db)?;
    let query_codes = encode_dataset(model, queries)?;
    evaluate_codes(&db_codes, db, &query_codes, queries, cfg)
}

/// Evaluates precomputed codes; `db_codes` and `query_codes` must list the
/// points of `db` and `queries` in the same order.
pub fn evaluate_codes(
    db_codes: &CodeDatabase,
    db: &MultiLabelDataset,
    query_codes: &CodeDatabase,
    queries: &MultiLabelDataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let labels: Vec<_> = db.points.iter().map(|p| p.labels.clone()).collect();
    let eval_queries: Vec<EvalQuery> = queries
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| EvalQuery {
            id: p.id,
            code: query_codes.code(i),
            labels: p.labels.clone(),
        })
        .collect();
    metrics::evaluate_queries(db_codes, &labels, &eval_queries, cfg)
}
