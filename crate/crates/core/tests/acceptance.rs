//! Acceptance suite. Runs every criterion in order, prints one
//! `[PASS]`/`[FAIL]` line each, and exits non-zero if any failed.
//!
//! Oracles here are written independently of the library code they check.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsrh::cli::{self, Cli, Command};
use dsrh::dataset::{load_dataset, ListItem};
use dsrh::loss::{self, LossConfig, QueryList};
use dsrh::metrics::{self, MetricsReport};
use dsrh::model::{init_weights, load_model, Architecture, HashModel};
use dsrh::retrieval::{hamming_distance, CodeDatabase, PackedCode};
use dsrh::trainer::{self, SampledList};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 metric oracle equivalence", metric_oracle),
        ("2 NDCG sanity anchors", ndcg_anchors),
        ("3 gradient vs finite differences", gradient_check),
        ("4 Hamming identity", hamming_identity),
        ("5 retrieval oracle", retrieval_oracle),
        ("6 end-to-end efficacy", efficacy),
        ("7 balance penalty", balance_penalty),
        ("8 unweighted list loss", unweighted_equivalence),
        ("9 pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] criterion {name}: {} ({:.2}s)",
            result.detail,
            started.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let t = started.elapsed();
    (t < limit, format!("{:.2}s of {}s budget", t.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- 1 and 2

/// Brute-force DCG: ideal order built by counting levels from the top, and
/// natural-log discounts instead of log2.
mod oracle {
    pub fn dcg(levels: &[u32], p: usize) -> f64 {
        let mut s = 0.0;
        for (i, &l) in levels.iter().enumerate().take(p) {
            let gain = (1u64 << l) as f64 - 1.0;
            s += gain * std::f64::consts::LN_2 / ((i + 2) as f64).ln();
        }
        s
    }

    pub fn ideal(levels: &[u32]) -> Vec<u32> {
        let top = levels.iter().copied().max().unwrap_or(0);
        let mut out = Vec::new();
        for r in (0..=top).rev() {
            for &l in levels {
                if l == r {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn ndcg(levels: &[u32], p: usize) -> Option<f64> {
        let z = dcg(&ideal(levels), p);
        if z == 0.0 {
            None
        } else {
            Some(dcg(levels, p) / z)
        }
    }

    pub fn acg(levels: &[u32], p: usize) -> f64 {
        let p = p.min(levels.len());
        if p == 0 {
            return 0.0;
        }
        let mut s = 0u64;
        for &l in &levels[..p] {
            s += l as u64;
        }
        s as f64 / p as f64
    }

    /// ACG@n recomputed from scratch at every relevant position.
    pub fn ap_w(levels: &[u32], truncation: Option<usize>) -> Option<f64> {
        let m = truncation.unwrap_or(levels.len()).min(levels.len());
        let rel: Vec<usize> = (0..m).filter(|&n| levels[n] > 0).collect();
        if rel.is_empty() {
            return None;
        }
        Some(rel.iter().map(|&n| acg(levels, n + 1)).sum::<f64>() / rel.len() as f64)
    }
}

fn metric_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    let mut check = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => {
            worst = worst.max((x - y).abs());
            if (x - y).abs() > 1e-12 {
                mismatches += 1;
            }
        }
        (None, None) => {}
        _ => mismatches += 1,
    };
    let mut group_lib = Vec::new();
    let mut group_oracle = Vec::new();
    let mut map_checked = 0;
    for v in 0..1000 {
        let len = rng.gen_range(1..=50);
        let levels: Vec<u32> = (0..len).map(|_| rng.gen_range(0..=5)).collect();
        let p = rng.gen_range(1..=60);
        check(metrics::ndcg_at(&levels, p), oracle::ndcg(&levels, p));
        check(Some(metrics::acg_at(&levels, p)), Some(oracle::acg(&levels, p)));
        check(
            metrics::average_precision_w(&levels, None),
            oracle::ap_w(&levels, None),
        );
        let t = rng.gen_range(1..=60);
        let (lib_ap, oracle_ap) = (
            metrics::average_precision_w(&levels, Some(t)),
            oracle::ap_w(&levels, Some(t)),
        );
        check(lib_ap, oracle_ap);
        group_lib.push(metrics::average_precision_w(&levels, None));
        group_oracle.push(oracle::ap_w(&levels, None));
        if v % 10 == 9 {
            let lib = metrics::weighted_map(&group_lib).ok().map(|(m, _)| m);
            let valid: Vec<f64> = group_oracle.iter().flatten().copied().collect();
            let want = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
            check(lib, want);
            map_checked += 1;
            group_lib.clear();
            group_oracle.clear();
        }
    }
    let (fast, time) = within(Duration::from_secs(10), started);
    outcome(
        mismatches == 0 && fast,
        format!(
            "1000 vectors, {map_checked} mAP groups, max |diff| {worst:.1e}, {mismatches} mismatches, {time}"
        ),
    )
}

fn ndcg_anchors() -> Outcome {
    let a = metrics::ndcg_at(&[2, 1, 0], 3).unwrap();
    let b = metrics::ndcg_at(&[0, 1, 2], 3).unwrap();
    outcome(
        a == 1.0 && (b - 0.58688).abs() <= 1e-5,
        format!("[2,1,0] -> {a}, [0,1,2] -> {b:.6} (want 0.58688 +/- 1e-5)"),
    )
}

// ---------------------------------------------------------------------- 3

const FD_STEP: f64 = 1e-6;
const KINK_TOL: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-5;
/// Denominator floor of the relative error. Coordinates whose true
/// derivative is far below this are compared on an absolute scale, where
/// central differences with step 1e-6 carry about 1e-10 of rounding noise.
const GRAD_REL_FLOOR: f64 = 1e-3;

struct GradProblem {
    model: HashModel,
    features: Vec<Vec<f64>>,
    lists: Vec<SampledList>,
    cfg: LossConfig,
}

impl GradProblem {
    fn random(seed: u64) -> GradProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(3..=6);
        let (a, b) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let k = if seed.is_multiple_of(2) { 8 } else { 16 };
        let model = init_weights(&Architecture::two_block(d, a, b, k), &mut rng).unwrap();
        let n = 12;
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let lists = (0..4)
            .map(|_| {
                let m = rng.gen_range(3..=4);
                let mut items = Vec::new();
                for r in 0..m {
                    let level = if r == 0 { rng.gen_range(1..=3) } else { rng.gen_range(0..=3) };
                    items.push(ListItem { index: rng.gen_range(0..n), level });
                }
                let levels: Vec<u32> = items.iter().map(|i| i.level).collect();
                SampledList {
                    query: rng.gen_range(0..n),
                    z: loss::ndcg_norm(&levels, levels.len()),
                    items,
                }
            })
            .collect();
        let cfg = LossConfig {
            margin: 1.0,
            alpha: [0.0, 1.0, 10.0][seed as usize % 3],
            beta: 0.0,
            weighted: true,
            ..LossConfig::default()
        };
        GradProblem { model, features, lists, cfg }
    }

    fn feats(&self) -> Vec<&[f64]> {
        self.features.iter().map(|f| f.as_slice()).collect()
    }

    fn objective(&self, model: &HashModel) -> f64 {
        let v = trainer::batch_objective(model, &self.feats(), &self.lists, &self.cfg, None).unwrap();
        v.ranking + v.balance
    }

    /// Hinge arguments of every triplet and the ReLU sign pattern.
    fn kinks(&self, model: &HashModel) -> (Vec<f64>, Vec<bool>) {
        let rows = trainer::batch_rows(&self.feats(), &self.lists);
        let (codes, trace) = model.forward_relaxed(&rows, None).unwrap();
        let mut args = Vec::new();
        let mut row = 0;
        for l in &self.lists {
            for (i, a) in l.items.iter().enumerate() {
                for (j, b) in l.items.iter().enumerate() {
                    if b.level < a.level {
                        args.push(loss::hinge_argument(
                            codes.row(row),
                            codes.row(row + 1 + i),
                            codes.row(row + 1 + j),
                            self.cfg.margin,
                        ));
                    }
                }
            }
            row += 1 + l.items.len();
        }
        let relu = trace
            .pre_activations
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|&v| v > 0.0))
            .collect();
        (args, relu)
    }
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let (mut checked, mut excluded, mut failures) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for seed in 0..20u64 {
        let prob = GradProblem::random(seed);
        max_params = max_params.max(prob.model.parameter_count());
        let (_, grads) =
            trainer::batch_gradients(&prob.model, &prob.feats(), &prob.lists, &prob.cfg, None).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();
        let mut coord = 0;
        let tensors = prob.model.params().len();
        for t in 0..tensors {
            let len = prob.model.params()[t].0.len();
            for e in 0..len {
                let mut plus = prob.model.clone();
                plus.params_mut()[t].0[e] += FD_STEP;
                let mut minus = prob.model.clone();
                minus.params_mut()[t].0[e] -= FD_STEP;
                let (args_p, relu_p) = prob.kinks(&plus);
                let (args_m, relu_m) = prob.kinks(&minus);
                let near_kink = args_p
                    .iter()
                    .zip(&args_m)
                    .any(|(p, m)| p.abs() < KINK_TOL || m.abs() < KINK_TOL || (*p > 0.0) != (*m > 0.0))
                    || relu_p != relu_m;
                let a = analytic[coord];
                coord += 1;
                if near_kink {
                    excluded += 1;
                    continue;
                }
                let numeric = (prob.objective(&plus) - prob.objective(&minus)) / (2.0 * FD_STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
                worst = worst.max(rel);
                checked += 1;
                if rel > GRAD_REL_TOL {
                    failures += 1;
                }
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(60), started);
    // a check that excludes most coordinates would be vacuous
    let enough = checked >= 10 * excluded.max(1);
    outcome(
        failures == 0 && fast && enough && max_params <= 1000,
        format!(
            "20 models (<= {max_params} params), {checked} coordinates checked, {excluded} near kinks skipped, \
             max rel err {worst:.2e} (tol {GRAD_REL_TOL:e}, floor {GRAD_REL_FLOOR:e}), {failures} failures, {time}"
        ),
    )
}

// ---------------------------------------------------------------------- 4

fn random_signs(rng: &mut impl Rng, k: usize) -> Vec<i8> {
    (0..k).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
}

fn hamming_identity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut pairs = 0;
    for k in [8usize, 32, 64, 96] {
        for _ in 0..10_000 {
            let a = random_signs(&mut rng, k);
            let b = random_signs(&mut rng, k);
            let inner: i64 = a.iter().zip(&b).map(|(&x, &y)| x as i64 * y as i64).sum();
            let want = (k as i64 - inner) / 2;
            let got = hamming_distance(&PackedCode::pack(&a).unwrap(), &PackedCode::pack(&b).unwrap()).unwrap();
            pairs += 1;
            if got as i64 != want || (k as i64 - inner) % 2 != 0 {
                mismatches += 1;
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(5), started);
    outcome(
        mismatches == 0 && fast,
        format!("{pairs} pairs over K in {{8,32,64,96}}, {mismatches} mismatches, {time}"),
    )
}

// ---------------------------------------------------------------------- 5

fn retrieval_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (n, k) = (10_000usize, 64usize);
    let raw: Vec<Vec<i8>> = (0..n).map(|_| random_signs(&mut rng, k)).collect();
    // ids deliberately not in insertion order
    let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % 100_003).collect();
    let mut db = CodeDatabase::new(k).unwrap();
    for (id, c) in ids.iter().zip(&raw) {
        db.push(*id, &PackedCode::pack(c).unwrap()).unwrap();
    }
    let mut mismatches = 0;
    for q in 0..100 {
        let query = if q % 4 == 0 { raw[rng.gen_range(0..n)].clone() } else { random_signs(&mut rng, k) };
        let mut expected: Vec<(u64, u32)> = raw
            .iter()
            .zip(&ids)
            .map(|(c, &id)| (id, c.iter().zip(&query).filter(|(a, b)| a != b).count() as u32))
            .collect();
        expected.sort_by_key(|&(_, d)| d); // stable: ties stay in insertion order
        let packed = PackedCode::pack(&query).unwrap();
        let all: Vec<(u64, u32)> = db.rank_all(&packed).unwrap().iter().map(|x| (x.id, x.distance)).collect();
        if all != expected {
            mismatches += 1;
        }
        let top = [1, 10, 100, n + 5][q % 4];
        let got: Vec<(u64, u32)> = db.search_topk(&packed, top).unwrap().iter().map(|x| (x.id, x.distance)).collect();
        if got[..] != expected[..top.min(n)] {
            mismatches += 1;
        }
    }
    let (fast, time) = within(Duration::from_secs(30), started);
    outcome(
        mismatches == 0 && fast,
        format!("100 queries, N={n}, K={k}, {mismatches} mismatching rankings, {time}"),
    )
}

// -------------------------------------------------------------- 6, 7 and 9

const SPLIT: [&str; 4] = ["--query-count", "200", "--split-seed", "1"];

fn run_cli(args: &[&str]) {
    let mut all = vec!["dsrh"];
    all.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    if let Err(e) = cli::run(&all, &mut out, &mut err) {
        panic!("dsrh {}: {}", args.join(" "), cli::one_line(&e));
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> train -> encode -> eval in `dir`, with extra train flags.
fn pipeline(dir: &Path, train_extra: &[&str]) {
    let (data, model, codes, metrics) = (dir.join("data.txt"), dir.join("model.bin"), dir.join("codes.bin"), dir.join("metrics.txt"));
    run_cli(&["synth", "--out", p(&data), "--points", "2000", "--labels", "8", "--dim", "32", "--clusters", "8", "--noise", "2.0", "--seed", "7"]);
    let mut train = vec!["train", "--data", p(&data), "--model", p(&model), "--bits", "32", "--epochs", "30", "--seed", "5", "--quiet"];
    train.extend_from_slice(&SPLIT);
    train.extend_from_slice(train_extra);
    run_cli(&train);
    run_cli(&["encode", "--model", p(&model), "--data", p(&data), "--out", p(&codes)]);
    let mut eval = vec!["eval", "--codes", p(&codes), "--data", p(&data), "--out", p(&metrics), "--cutoffs", "50"];
    eval.extend_from_slice(&SPLIT);
    run_cli(&eval);
}

fn read_report(path: &Path) -> MetricsReport {
    MetricsReport::from_text(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn efficacy() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[]);
    let (data, base_codes, base_metrics) = (dir.path().join("data.txt"), dir.path().join("base.bin"), dir.path().join("base.txt"));
    let mut baseline = vec!["baseline", "--data", p(&data), "--out", p(&base_codes), "--bits", "32", "--seed", "3"];
    baseline.extend_from_slice(&SPLIT);
    run_cli(&baseline);
    let mut eval = vec!["eval", "--codes", p(&base_codes), "--data", p(&data), "--out", p(&base_metrics), "--cutoffs", "50"];
    eval.extend_from_slice(&SPLIT);
    run_cli(&eval);

    let trained = read_report(&dir.path().join("metrics.txt"));
    let base = read_report(&base_metrics);
    let (t_ndcg, b_ndcg) = (trained.ndcg_at(50).unwrap(), base.ndcg_at(50).unwrap());
    let (d_ndcg, d_map) = (t_ndcg - b_ndcg, trained.map_w - base.map_w);
    let (fast, time) = within(Duration::from_secs(300), started);
    outcome(
        d_ndcg >= 0.15 && d_map >= 0.10 && fast,
        format!(
            "NDCG@50 {t_ndcg:.4} vs random projection {b_ndcg:.4} (+{d_ndcg:.4}, need 0.15); \
             weighted mAP {:.4} vs {:.4} (+{d_map:.4}, need 0.10); {time}",
            trained.map_w, base.map_w
        ),
    )
}

fn balance_penalty() -> Outcome {
    let activation = |alpha: &str| {
        let dir = tempfile::tempdir().unwrap();
        pipeline(dir.path(), &["--alpha", alpha]);
        let ds = load_dataset(dir.path().join("data.txt")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, train_set) = dsrh::dataset::split_train_query(&ds, 200, &mut rng).unwrap();
        let model = load_model(dir.path().join("model.bin")).unwrap();
        trainer::mean_abs_bit_activation(&model, &train_set).unwrap()
    };
    let (strong, none) = (activation("10"), activation("0"));
    outcome(
        strong < none,
        format!("mean |per-bit mean relaxed activation|: alpha=10 -> {strong:.5}, alpha=0 -> {none:.5}"),
    )
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[]);
    let files = ["data.txt", "model.bin", "model.bin.report.txt", "codes.bin", "metrics.txt"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        format!("compared {} between two runs; differing: {differing:?}", files.join(", ")),
    )
}

// ---------------------------------------------------------------------- 8

fn unweighted_equivalence() -> Outcome {
    // the flag reaches the loss configuration
    let cli = <Cli as clap::Parser>::try_parse_from([
        "dsrh", "train", "--data", "d", "--model", "m", "--bits", "8", "--unweighted",
    ])
    .unwrap();
    let flag_ok = matches!(&cli.command, Command::Train(t) if !t.train_config().loss.weighted);

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let cfg = LossConfig { weighted: false, ..LossConfig::default() };
    let mut mismatches = 0;
    let mut active = 0;
    for _ in 0..100 {
        let k = [8, 16, 32][rng.gen_range(0..3)];
        let m = rng.gen_range(3..=8);
        let mut code = || -> Vec<f64> { (0..k).map(|_| rng.gen_range(-0.999..0.999)).collect() };
        let query = code();
        let items: Vec<Vec<f64>> = (0..m).map(|_| code()).collect();
        let levels: Vec<u32> = (0..m).map(|_| rng.gen_range(0..=3)).collect();
        let list = QueryList {
            query: &query,
            items: items.iter().map(|v| v.as_slice()).collect(),
            levels: levels.clone(),
            z: 1.0,
        };
        let got = loss::list_loss(&list, &cfg).unwrap().loss;
        // unit-weight hinge sum over every pair with r_j < r_i
        let dist = |a: &[f64], b: &[f64]| (k as f64 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()) / 2.0;
        let mut want = 0.0;
        for i in 0..m {
            for j in 0..m {
                if levels[j] < levels[i] {
                    let arg = dist(&query, &items[i]) - dist(&query, &items[j]) + cfg.margin;
                    if arg > 0.0 {
                        want += arg;
                        active += 1;
                    }
                }
            }
        }
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        flag_ok && mismatches == 0,
        format!("--unweighted selects weight 1: {flag_ok}; 100 lists ({active} active triplets), {mismatches} inexact"),
    )
}
