//! The `dsrh` command line: synth, train, encode, search, eval, baseline.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::RandomProjection;
use crate::dataset::{load_dataset, split_train_query, MultiLabelDataset};
use crate::io::write_atomic;
use crate::loss::{LossConfig, WeightNormalization};
use crate::metrics::EvalConfig;
use crate::model::{init_weights, load_model, save_model, Architecture};
use crate::retrieval::{encode_dataset, load_codes, save_codes, CodeDatabase, PackedCode};
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dsrh", version, about = "Train and search ranking-preserving binary hash codes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-label dataset.
    Synth(SynthArgs),
    /// Train a hash model and write its checkpoint.
    Train(TrainArgs),
    /// Encode every point of a dataset into a code file.
    Encode(EncodeArgs),
    /// Rank a code file by Hamming distance to one or more queries.
    Search(SearchArgs),
    /// Evaluate a code file on a query/database split.
    Eval(EvalArgs),
    /// Encode a dataset with sign-of-random-projection codes.
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub points: usize,
    #[arg(long, default_value_t = 8)]
    pub labels: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 3)]
    pub labels_per_cluster: usize,
    /// Noise norm relative to a label prototype.
    #[arg(long, default_value_t = 2.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Which points act as queries. Everything else is the database.
#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Hold out this many random points as queries.
    #[arg(long, conflicts_with = "query_ids")]
    pub query_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// File of whitespace-separated query ids.
    #[arg(long)]
    pub query_ids: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Training report; defaults to `<model>.report.txt`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub bits: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout_keep: f64,
    #[arg(long, default_value_t = 3)]
    pub list_length: usize,
    /// Every triplet gets weight 1 instead of its NDCG weight.
    #[arg(long)]
    pub unweighted: bool,
    /// Normalize triplet weights by the ideal DCG of the whole database
    /// ranking instead of the sampled list.
    #[arg(long)]
    pub per_database_norm: bool,
    /// Hidden layer widths; the last two feed the hash layer.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Do not print per-step progress.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub split: SplitArgs,
}

impl TrainArgs {
    /// The trainer configuration these flags select.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            loss: LossConfig {
                margin: self.margin,
                alpha: self.alpha,
                beta: self.beta,
                weighted: !self.unweighted,
                normalization: if self.per_database_norm {
                    WeightNormalization::PerDatabase
                } else {
                    WeightNormalization::PerList
                },
            },
            dropout_keep: self.dropout_keep,
            list_length: self.list_length,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub codes: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// One query feature vector, comma separated.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "queries", conflicts_with = "queries")]
    pub query: Option<String>,
    /// Dataset file of queries; results are printed per query.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub codes: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub cutoffs: Vec<usize>,
    /// Weighted AP over the top `n` results instead of the full ranking.
    #[arg(long)]
    pub ap_top: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Center on the database part of this split (all points if absent).
    #[command(flatten)]
    pub split: SplitArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli.command, out, err)
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Encode(a) => cmd_encode(&a, out),
        Command::Search(a) => cmd_search(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Baseline(a) => cmd_baseline(&a, out),
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ds = synth::generate(&SynthConfig {
        points: a.points,
        labels: a.labels,
        dim: a.dim,
        clusters: a.clusters,
        labels_per_cluster: a.labels_per_cluster,
        noise: a.noise,
        seed: a.seed,
    })?;
    let text = ds.to_text();
    write_atomic(&a.out, |w| w.write_all(text.as_bytes()))?;
    writeln!(out, "wrote {} points to {}", ds.len(), a.out.display())?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<()> {
    if a.hidden.len() < 2 {
        bail!("--hidden needs at least two widths");
    }
    let cfg = a.train_config();
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let (_, train_set) = split(&ds, &a.split)?;
    let arch = Architecture {
        input_dim: ds.dim,
        hidden: a.hidden.clone(),
        tap_a: a.hidden.len() - 2,
        bits: a.bits,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = init_weights(&arch, &mut init_rng)?;

    let mut progress_err = None;
    let (model, report) = trainer::train_with_progress(model, &train_set, &cfg, |r| {
        if !a.quiet && progress_err.is_none() {
            if let Err(e) = writeln!(err, "{r}") {
                progress_err = Some(e);
            }
        }
    })?;
    if let Some(e) = progress_err {
        return Err(e).context("writing progress");
    }

    let report_path = a.report.clone().unwrap_or_else(|| suffixed(&a.model, ".report.txt"));
    save_model(&model, &a.model)?;
    let text = report.to_text();
    write_atomic(&report_path, |w| w.write_all(text.as_bytes()))?;
    let total_ms: u128 = report.epochs.iter().map(|e| e.wall_ms).sum();
    match report.epochs.last() {
        Some(last) => writeln!(
            out,
            "trained {} epochs on {} points in {total_ms} ms, final mean objective {}",
            report.epochs.len(),
            train_set.len(),
            last.mean_objective
        )?,
        None => writeln!(out, "0 epochs: wrote the initialization")?,
    }
    Ok(())
}

pub fn cmd_encode(a: &EncodeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let db = encode_dataset(&model, &ds)?;
    save_codes(&db, &a.out)?;
    writeln!(out, "encoded {} points with {} bits", db.len(), db.bits())?;
    Ok(())
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let db = load_codes(&a.codes)?;
    let model = load_model(&a.model)?;
    if model.bits() != db.bits() {
        bail!("model has {} bits but the code file has {}", model.bits(), db.bits());
    }
    let queries: Vec<(Option<u64>, Vec<f64>)> = match (&a.query, &a.queries) {
        (Some(q), _) => vec![(None, parse_vector(q)?)],
        (None, Some(path)) => load_dataset(path)?
            .points
            .into_iter()
            .map(|p| (Some(p.id), p.features))
            .collect(),
        (None, None) => bail!("one of --query or --queries is required"),
    };
    for (id, features) in &queries {
        let code = &model.forward_binary(&[features])?[0];
        let neighbors = db.search_topk(&PackedCode::pack(code)?, a.k)?;
        if let Some(id) = id {
            writeln!(out, "# query {id}")?;
        }
        for (rank, n) in neighbors.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", rank + 1, n.id, n.distance)?;
        }
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let codes = load_codes(&a.codes)?;
    let ds = load_dataset(&a.data)?;
    let (queries, db) = split(&ds, &a.split)?;
    let db_codes = select_codes(&codes, &db)?;
    let query_codes = select_codes(&codes, &queries)?;
    let cfg = EvalConfig {
        cutoffs: a.cutoffs.clone(),
        ap_truncation: a.ap_top,
    };
    let report = trainer::evaluate_codes(&db_codes, &db, &query_codes, &queries, &cfg)?;
    let text = report.to_text();
    write_atomic(&a.out, |w| w.write_all(text.as_bytes()))?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn cmd_baseline(a: &BaselineArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data)?;
    let fit = if a.split.query_count.is_some() || a.split.query_ids.is_some() {
        split(&ds, &a.split)?.1
    } else {
        ds.clone()
    };
    let rp = RandomProjection::fit(&fit, a.bits, a.seed)?;
    let db = rp.encode(&ds)?;
    save_codes(&db, &a.out)?;
    writeln!(out, "encoded {} points with {} random-projection bits", db.len(), db.bits())?;
    Ok(())
}

/// Splits `ds` into (queries, database) as the flags ask. Without any split
/// flag there are no queries.
pub fn split(ds: &MultiLabelDataset, a: &SplitArgs) -> anyhow::Result<(MultiLabelDataset, MultiLabelDataset)> {
    if let Some(path) = &a.query_ids {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut wanted = HashSet::new();
        for tok in text.split_whitespace() {
            let id: u64 = tok
                .parse()
                .with_context(|| format!("{}: bad query id {tok:?}", path.display()))?;
            wanted.insert(id);
        }
        let (q, d): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| wanted.contains(&ds.points[i].id));
        if q.len() != wanted.len() {
            bail!("{}: {} query ids are not in the dataset", path.display(), wanted.len() - q.len());
        }
        return Ok((ds.select(&q), ds.select(&d)));
    }
    match a.query_count {
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.split_seed);
            Ok(split_train_query(ds, n, &mut rng)?)
        }
        None => Ok((ds.select(&[]), ds.clone())),
    }
}

/// Codes of `ds`'s points, in dataset order.
fn select_codes(codes: &CodeDatabase, ds: &MultiLabelDataset) -> anyhow::Result<CodeDatabase> {
    let index: HashMap<u64, usize> = codes.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut selected = CodeDatabase::new(codes.bits())?;
    for p in &ds.points {
        let &i = index
            .get(&p.id)
            .ok_or_else(|| anyhow!("point {} has no code in the code file", p.id))?;
        selected.push(p.id, &codes.code(i))?;
    }
    Ok(selected)
}

fn parse_vector(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            let v: f64 = t.parse().with_context(|| format!("bad query value {t:?}"))?;
            if !v.is_finite() {
                bail!("query value {t:?} is not finite");
            }
            Ok(v)
        })
        .collect()
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Formats an error as one line: the message chain joined by `: `, skipping
/// causes already spelled out by their parent.
pub fn one_line(e: &anyhow::Error) -> String {
    if let Some(ce) = e.downcast_ref::<clap::Error>() {
        let rendered = ce.to_string();
        let text: Vec<&str> = rendered
            .lines()
            .map(str::trim)
            .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
            .filter(|l| !l.is_empty())
            .collect();
        let joined = text.join(" ");
        return joined.strip_prefix("error: ").unwrap_or(&joined).to_string();
    }
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|prev| prev.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ").replace('\n', " ")
}
