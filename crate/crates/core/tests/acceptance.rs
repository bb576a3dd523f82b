//! Acceptance suite. Prints one PASS/FAIL line per criterion and writes
//! them to `target/acceptance/summary.txt`. With `ACCEPTANCE_STRICT` set,
//! a failing criterion (other than the advisory timing one) makes the run
//! exit non-zero.
//!
//! The trained surrogate is cached under `target/acceptance/`; delete it to
//! retrain from scratch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rbb::diffcore::{finite_difference_check, max_relative_error, soft_maximum, DiffError, Tape, Tensor, Term, Var};
use rbb::exact_routing::path_vector;
use rbb::gnn::{GnnConfig, GnnModel, PairQuery};
use rbb::localsearch::{local_search, Budget, SearchConfig};
use rbb::netgraph::{default_ospf_weights, utilization, DemandVector, Graph, LinkSpec, WeightVector};
use rbb::optimizer::{objective_and_gradient, rbb_step, soft_objective, RbbConfig};
use rbb::trainer::{
    batch_loss, edge_accuracy, train, validation_samples, GraphSource, TrainConfig, TrainingSample, WeightPrior,
};
use rbb::workbench::experiment::{
    run_experiment, summarize, write_records, write_summary, CalibrationSettings, ExperimentRecord, RbbSettings,
    SearchSettings,
};
use rbb::workbench::{load_topology, CapacityMode, Method, SuiteConfig};

const TRAIN_STEPS: usize = 16000;
const TRAIN_SEED: u64 = 1;
const VALIDATION_SAMPLES: usize = 500;
const EXPERIMENT_SAMPLES: usize = 200;
const EXPERIMENT_SEED: u64 = 2024;
const TOPOLOGIES: [&str; 4] = ["abilene", "nobel-germany", "polska", "nsfnet"];

struct Outcome {
    pass: bool,
    /// Non-fatal criteria report FAIL without failing the run.
    fatal: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            fatal: true,
            detail: detail.into(),
        }
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn data_dir() -> PathBuf {
    manifest_dir().join("../../data/topologies")
}

fn work_dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| manifest_dir().join("../../target"));
    let dir = target.join("acceptance");
    std::fs::create_dir_all(&dir).expect("create acceptance dir");
    dir
}

fn topology(name: &str) -> Graph {
    load_topology(&data_dir().join(format!("{name}.txt")))
        .and_then(|s| s.to_graph(CapacityMode::Unit))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Entries bounded away from zero, so ReLU kinks stay out of reach of `h`.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Scalar = Box<dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>>;

fn sum_of_squares(t: &mut Tape, y: Var) -> Result<Var, DiffError> {
    let sq = t.mul(y, y)?;
    t.sum(sq)
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Scalar)> {
    let w = random_tensor(rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(rng, &[3], -1.0, 1.0);
    let other = random_tensor(rng, &[5, 4], -1.0, 1.0);
    let x = random_tensor(rng, &[5, 4], -2.0, 2.0);
    let labels = Arc::new(Tensor::new(vec![5, 4], (0..20).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect()).unwrap());
    let weights = Arc::new((0..20).map(|_| rng.gen_range(0.01..0.1)).collect::<Vec<f64>>());
    let gain = random_tensor(rng, &[4], 0.5, 1.5);
    let idx = Arc::new((0..7).map(|_| rng.gen_range(0..5)).collect::<Vec<usize>>());
    let mut checks: Vec<(&'static str, Tensor, Scalar)> = Vec::new();
    {
        let (w, b) = (w.clone(), b.clone());
        checks.push(("affine/x", x.clone(), Box::new(move |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.affine(x, w, Some(b))?;
            sum_of_squares(t, y)
        })));
    }
    {
        let (x, b) = (x.clone(), b.clone());
        checks.push(("affine/w", w.clone(), Box::new(move |t, w| {
            let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.affine(x, w, Some(b))?;
            sum_of_squares(t, y)
        })));
    }
    {
        let (x, w) = (x.clone(), w.clone());
        checks.push(("affine/b", b.clone(), Box::new(move |t, b| {
            let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.affine(x, w, Some(b))?;
            sum_of_squares(t, y)
        })));
    }
    {
        let wt = w.clone().reshaped(vec![4, 3]).unwrap();
        checks.push(("matmul", x.clone(), Box::new(move |t, x| {
            let wt = t.constant(wt.clone());
            let y = t.matmul(x, wt)?;
            sum_of_squares(t, y)
        })));
    }
    checks.push(("relu", off_zero(rng, &[5, 4]), Box::new(|t, x| {
        let y = t.relu(x)?;
        let z = t.scale(y, 1.5)?;
        sum_of_squares(t, z)
    })));
    {
        let labels = labels.clone();
        checks.push(("sigmoid+bce", x.clone(), Box::new(move |t, x| {
            let p = t.sigmoid(x)?;
            t.binary_cross_entropy(p, labels.clone())
        })));
    }
    {
        let (labels, weights) = (labels.clone(), weights.clone());
        checks.push(("weighted bce", x.clone(), Box::new(move |t, x| {
            let p = t.sigmoid(x)?;
            t.weighted_binary_cross_entropy(p, labels.clone(), weights.clone())
        })));
    }
    {
        let gain = gain.clone();
        let bias = random_tensor(rng, &[4], -0.5, 0.5);
        let other = other.clone();
        checks.push(("layer_norm/x", x.clone(), Box::new(move |t, x| {
            let (g, b) = (t.constant(gain.clone()), t.constant(bias.clone()));
            let y = t.layer_norm(x, g, b)?;
            let o = t.constant(other.clone());
            let z = t.mul(y, o)?;
            let z = t.mul(z, y)?;
            t.sum(z)
        })));
    }
    {
        let x = x.clone();
        let other = other.clone();
        checks.push(("layer_norm/gain", gain.clone(), Box::new(move |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::zeros(&[4]));
            let y = t.layer_norm(xv, g, b)?;
            let o = t.constant(other.clone());
            let z = t.mul(y, o)?;
            sum_of_squares(t, z)
        })));
    }
    {
        let x = x.clone();
        let gain = gain.clone();
        checks.push(("layer_norm/bias", random_tensor(rng, &[4], -0.5, 0.5), Box::new(move |t, b| {
            let xv = t.constant(x.clone());
            let g = t.constant(gain.clone());
            let y = t.layer_norm(xv, g, b)?;
            let s = t.sigmoid(y)?;
            t.sum(s)
        })));
    }
    {
        let other = other.clone();
        checks.push(("concat", x.clone(), Box::new(move |t, x| {
            let o = t.constant(other.clone());
            let c = t.concat(&[x, o, x])?;
            let r = t.reshape(c, vec![5 * 12])?;
            sum_of_squares(t, r)
        })));
    }
    {
        let idx = idx.clone();
        checks.push(("gather+scatter_add", x.clone(), Box::new(move |t, x| {
            let g = t.gather_rows(x, idx.clone())?;
            let back = Arc::new((0..idx.len()).map(|i| i % 3).collect::<Vec<usize>>());
            let s = t.scatter_add_rows(g, back, 3)?;
            let s3 = t.mul(s, s)?;
            let s3 = t.mul(s3, s)?;
            t.sum(s3)
        })));
    }
    {
        let other = other.clone();
        checks.push(("add+mul", x.clone(), Box::new(move |t, x| {
            let o = t.constant(other.clone());
            let a = t.add(x, o)?;
            let m = t.mul(a, x)?;
            sum_of_squares(t, m)
        })));
    }
    checks.push(("soft_maximum", random_tensor(rng, &[9], 0.0, 2.0), Box::new(|t, x| t.soft_maximum(x, 0.1))));
    {
        let (w, b) = (w.clone(), b.clone());
        let y = off_zero(rng, &[4, 3]);
        let idx = Arc::new((0..5).map(|_| rng.gen_range(0..4)).collect::<Vec<usize>>());
        checks.push(("linear_sum", x.clone(), Box::new(move |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let yv = t.constant(y.clone());
            let h = t.linear_sum(&[Term::Affine(x, w), Term::Gathered(yv, idx.clone())], Some(b), true)?;
            sum_of_squares(t, h)
        })));
    }
    checks
}

fn ring(n: usize) -> Graph {
    let links: Vec<LinkSpec> = (0..n).map(|i| LinkSpec::undirected(i, (i + 1) % n, 1.0)).collect();
    Graph::build("ring", n, &links).unwrap()
}

/// A small model with every parameter jittered. Freshly initialized biases
/// are zero, which parks some ReLU inputs exactly on the kink.
fn tiny_model(seed: u64) -> GnnModel {
    let mut model = GnnModel::new(
        GnnConfig {
            hidden: 6,
            rounds: 3,
            shared_processor: false,
        },
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for slot in model.param_slots_mut() {
        for v in Arc::make_mut(slot).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

const FD_STEP: f64 = 1e-5;

/// Central difference of `f` along one coordinate, or `None` when the two
/// one-sided slopes disagree as they do across a kink.
fn smooth_central(f: &mut dyn FnMut(f64) -> f64) -> Option<f64> {
    let h = FD_STEP;
    let (up, base, down) = (f(h), f(0.0), f(-h));
    let (fwd, bwd) = ((up - base) / h, (base - down) / h);
    if (fwd - bwd).abs() > 0.05 * fwd.abs().max(bwd.abs()) + 1e-7 {
        return None;
    }
    Some((up - down) / (2.0 * h))
}

fn nudge(model: &mut GnnModel, index: usize, delta: f64) {
    let mut offset = 0;
    for slot in model.param_slots_mut() {
        if index < offset + slot.len() {
            Arc::make_mut(slot).data_mut()[index - offset] += delta;
            return;
        }
        offset += slot.len();
    }
}

/// Training-loss error over sixty random parameters and objective error over
/// every edge weight, for one random small instance.
fn end_to_end_errors(seed: u64, attempt: u64) -> Option<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + 100 * seed + attempt);
    let g = Arc::new(ring(rng.gen_range(4..7)));
    let mut model = tiny_model(100 * seed + attempt);
    let samples: Vec<TrainingSample> = (0..2)
        .map(|_| {
            let w = WeightVector::new((0..g.edge_count()).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
            let u = rng.gen_range(0..g.node_count());
            let v = (u + rng.gen_range(1..g.node_count())) % g.node_count();
            TrainingSample::labelled(g.clone(), w, PairQuery::new(u, v).unwrap()).unwrap()
        })
        .collect();
    let (_, grads) = batch_loss(&model, &samples, true).unwrap();
    let analytic: Vec<f64> = grads.unwrap().into_iter().flat_map(Tensor::into_data).collect();
    let picks: Vec<usize> = (0..60).map(|_| rng.gen_range(0..analytic.len())).collect();
    let mut numeric = Vec::new();
    for &p in &picks {
        numeric.push(smooth_central(&mut |delta| {
            nudge(&mut model, p, delta);
            let l = batch_loss(&model, &samples, false).unwrap().0;
            nudge(&mut model, p, -delta);
            l
        })?);
    }
    let picked: Vec<f64> = picks.iter().map(|&p| analytic[p]).collect();
    let loss_err = max_relative_error(&picked, &numeric).0;

    let d = DemandVector::new((0..g.pair_count()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let w = WeightVector::new((0..g.edge_count()).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
    let (_, grad) = objective_and_gradient(&model, &g, &w, &d, 0.1).unwrap();
    let mut numeric = Vec::new();
    for k in 0..w.len() {
        numeric.push(smooth_central(&mut |delta| {
            let mut v = w.values().to_vec();
            v[k] += delta;
            soft_objective(&model, &g, &WeightVector::new(v).unwrap(), &d, 0.1).unwrap()
        })?);
    }
    Some((loss_err, max_relative_error(&grad, &numeric).0))
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst_prim = (0.0f64, String::new());
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, x, f) in primitive_checks(&mut rng) {
            let r = finite_difference_check(&f, &x, 1e-5).unwrap();
            if r.max_rel_error > worst_prim.0 || worst_prim.1.is_empty() {
                worst_prim = (r.max_rel_error, format!("{name} seed {seed}"));
            }
        }
    }
    let mut worst_loss = 0.0f64;
    let mut worst_objective = 0.0f64;
    let mut redrawn = 0;
    for seed in 0..20u64 {
        // A ReLU crossing inside [x - h, x + h] breaks the smoothness that
        // central differences rely on; such points are redrawn.
        for attempt in 0.. {
            assert!(attempt < 10, "seed {seed}: no smooth evaluation point found");
            match end_to_end_errors(seed, attempt) {
                Some((loss, objective)) => {
                    worst_loss = worst_loss.max(loss);
                    worst_objective = worst_objective.max(objective);
                    break;
                }
                None => redrawn += 1,
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worst_prim.0 < 1e-4 && worst_loss < 1e-3 && worst_objective < 1e-3 && secs < 60.0,
        format!(
            "primitives max rel err {:.2e} ({}), training loss {:.2e}, objective {:.2e}, 20 seeds ({redrawn} points redrawn at a kink), {secs:.1} s",
            worst_prim.0, worst_prim.1, worst_loss, worst_objective
        ),
    )
}

/// Random strongly connected graph: a random spanning tree plus extra
/// undirected links, some links one-way on top of a two-way backbone.
fn random_small_graph(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.gen_range(2..=6);
    let mut links = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let caps = [1.0, 2.0, 4.0];
    for v in 1..n {
        let u = rng.gen_range(0..v);
        seen.insert((u.min(v), u.max(v)));
        links.push(LinkSpec::undirected(u, v, *caps.choose(rng).unwrap()));
    }
    for _ in 0..rng.gen_range(0..=n) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            links.push(LinkSpec::undirected(a, b, *caps.choose(rng).unwrap()));
        }
    }
    Graph::build("small", n, &links).unwrap()
}

/// Minimum path cost by enumerating every simple path.
fn brute_force_cost(g: &Graph, w: &[f64], u: usize, v: usize) -> f64 {
    fn dfs(g: &Graph, w: &[f64], at: usize, v: usize, seen: &mut Vec<bool>, cost: f64, best: &mut f64) {
        if at == v {
            *best = best.min(cost);
            return;
        }
        for &k in g.out_edges(at) {
            let next = g.edge(k).receiver;
            if !seen[next] {
                seen[next] = true;
                dfs(g, w, next, v, seen, cost + w[k], best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; g.node_count()];
    seen[u] = true;
    let mut best = f64::INFINITY;
    dfs(g, w, u, v, &mut seen, 0.0, &mut best);
    best
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = Vec::new();
    for inst in 0..200 {
        let g = random_small_graph(&mut rng);
        // Integer weights, dyadic demands and power-of-two capacities keep
        // every sum exact in any order.
        let w = WeightVector::new((0..g.edge_count()).map(|_| f64::from(rng.gen_range(1u8..=10))).collect()).unwrap();
        let d = DemandVector::new((0..g.pair_count()).map(|_| f64::from(rng.gen_range(0u8..=16)) / 4.0).collect()).unwrap();
        let mut load = vec![0.0; g.edge_count()];
        let mut paths = Vec::new();
        for (i, (u, v)) in g.pairs().iter().enumerate() {
            let p = path_vector(&g, &w, u, v).unwrap();
            if p.validate(&g, u, v).is_err() || p.cost(&w) != brute_force_cost(&g, w.values(), u, v) {
                mismatches.push(format!("instance {inst} pair ({u},{v})"));
            }
            for (k, &on) in p.membership().iter().enumerate() {
                if on {
                    load[k] += d.values()[i];
                }
            }
            paths.push(p);
        }
        let rho = utilization(&g, &rbb::exact_routing::routing_matrix(&g, &w).unwrap(), &d).unwrap();
        for (k, l) in load.iter().enumerate() {
            if rho.values()[k] != l / g.capacities()[k] {
                mismatches.push(format!("instance {inst} edge {k} utilization"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        mismatches.is_empty() && secs < 60.0,
        format!(
            "200 graphs with n_v <= 6, {} mismatches{}, {secs:.2} s",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn train_config() -> TrainConfig {
    TrainConfig {
        steps: TRAIN_STEPS,
        batch_size: 32,
        learning_rate: 1e-3,
        seed: TRAIN_SEED,
        eval_every: 0,
        source: GraphSource::Online,
        ..TrainConfig::default()
    }
}

/// The trained surrogate, from cache or trained now.
fn surrogate() -> (GnnModel, PathBuf, String) {
    let path = work_dir().join(format!("surrogate-h128-t8-{TRAIN_STEPS}steps-seed{TRAIN_SEED}.ckpt"));
    if let Ok(model) = GnnModel::load(&path) {
        return (model, path, "cached".into());
    }
    let started = Instant::now();
    let mut model = GnnModel::new(GnnConfig::default(), TRAIN_SEED).unwrap();
    train(&mut model, &train_config(), &[]).expect("training");
    model.save(&path).expect("save surrogate");
    let note = format!("trained in {:.0} s", started.elapsed().as_secs_f64());
    (model, path, note)
}

fn fidelity_samples() -> Vec<TrainingSample> {
    let graphs = vec![Arc::new(topology("abilene")), Arc::new(topology("nobel-germany"))];
    validation_samples(&graphs, VALIDATION_SAMPLES, &WeightPrior::default(), 77).unwrap()
}

fn criterion_3(model: &GnnModel, note: &str, samples: &[TrainingSample]) -> (Outcome, f64) {
    let acc = edge_accuracy(model, samples).unwrap();
    (
        Outcome::new(
            acc >= 0.95,
            format!(
                "pooled edge accuracy {acc:.4} on {} held-out samples (abilene, nobel-germany) after {TRAIN_STEPS} steps, H=128, T=8 ({note})",
                samples.len()
            ),
        ),
        acc,
    )
}

fn run_suite(model_path: &Path) -> (Vec<ExperimentRecord>, usize, f64) {
    let suite = SuiteConfig {
        topologies: TOPOLOGIES.iter().map(|t| data_dir().join(format!("{t}.txt"))).collect(),
        samples: EXPERIMENT_SAMPLES,
        methods: vec![Method::DefaultOspf, Method::Rbb, Method::Ls, Method::RbbLs],
        model: Some(model_path.to_path_buf()),
        seed: EXPERIMENT_SEED,
        rbb: RbbSettings {
            tau: 0.1,
            alpha: 0.02,
            steps: 3,
        },
        search: SearchSettings {
            budget_ms: 1000,
            budget_evaluations: None,
            w_max: 64,
        },
        calibration: CalibrationSettings::default(),
        keep_capacities: false,
    };
    let started = Instant::now();
    let out = run_experiment(&suite, Path::new(".")).expect("experiment suite");
    let dir = work_dir();
    write_records(std::fs::File::create(dir.join("records.csv")).unwrap(), &out.records).unwrap();
    write_summary(std::fs::File::create(dir.join("summary.csv")).unwrap(), &summarize(&out)).unwrap();
    (out.records, out.failures.len(), started.elapsed().as_secs_f64())
}

fn reduction(r: &ExperimentRecord) -> f64 {
    (r.initial_max_util - r.final_max_util) / r.initial_max_util
}

fn by_topology(records: &[ExperimentRecord], method: Method) -> BTreeMap<String, Vec<&ExperimentRecord>> {
    let mut out: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == method) {
        out.entry(r.topology.clone()).or_default().push(r);
    }
    out
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn criterion_4(records: &[ExperimentRecord], failures: usize) -> Outcome {
    let guarded = [Method::Rbb, Method::Ls, Method::RbbLs];
    let worse = records
        .iter()
        .filter(|r| guarded.contains(&r.method) && r.final_max_util > r.initial_max_util)
        .count();
    let mut ok = failures == 0 && worse == 0;
    let mut parts = Vec::new();
    let rbb = by_topology(records, Method::Rbb);
    for t in TOPOLOGIES {
        let rows = rbb.get(t).map(Vec::as_slice).unwrap_or(&[]);
        let mean_red = mean(rows.iter().map(|r| reduction(r)));
        let strict = rows.iter().filter(|r| r.final_max_util < r.initial_max_util).count() as f64 / rows.len() as f64;
        ok &= rows.len() >= EXPERIMENT_SAMPLES && mean_red >= 0.15 && strict >= 0.90;
        parts.push(format!("{t}: n={} reduction {:.1}%, improved {:.1}%", rows.len(), 100.0 * mean_red, 100.0 * strict));
    }
    let all: Vec<&ExperimentRecord> = rbb.values().flatten().copied().collect();
    parts.push(format!(
        "overall reduction {:.1}%, improved {:.1}%",
        100.0 * mean(all.iter().map(|r| reduction(r))),
        100.0 * all.iter().filter(|r| r.final_max_util < r.initial_max_util).count() as f64 / all.len() as f64
    ));
    parts.push(format!("never-worse violations {worse}, failed samples {failures}"));
    Outcome::new(ok, parts.join("; "))
}

fn criterion_5(records: &[ExperimentRecord]) -> Outcome {
    let ls = by_topology(records, Method::Ls);
    let warm = by_topology(records, Method::RbbLs);
    let mut wins = 0;
    let mut parts = Vec::new();
    for t in TOPOLOGIES {
        let a = mean(warm.get(t).into_iter().flatten().map(|r| reduction(r)));
        let b = mean(ls.get(t).into_iter().flatten().map(|r| reduction(r)));
        if a >= b {
            wins += 1;
        }
        parts.push(format!("{t}: rbb+ls {:.1}% vs ls {:.1}%", 100.0 * a, 100.0 * b));
    }
    let overall = mean(warm.values().flatten().map(|r| reduction(r)));
    parts.push(format!("{wins}/4 topologies, overall rbb+ls reduction {:.1}%", 100.0 * overall));
    Outcome::new(wins >= 3 && overall >= 0.20, parts.join("; "))
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 2000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        proptest::collection::vec(-50.0f64..50.0, 1..40),
        -100.0f64..100.0,
        1usize..40,
        any::<u64>(),
    );
    let result = runner.run(&strategy, |(x, c, n, seed)| {
        // Equal elements: the soft maximum is the common value, exactly.
        let same = vec![c; n];
        for tau in [1e-3, 0.1, 1.0, 10.0] {
            prop_assert_eq!(soft_maximum(&same, tau).unwrap(), c);
        }
        // Shrinking tau approaches the hard maximum monotonically.
        let max = x.iter().copied().fold(f64::MIN, f64::max);
        let mut prev = f64::INFINITY;
        for tau in [10.0, 3.0, 1.0, 0.3, 0.1, 0.03, 0.01, 1e-3] {
            let s = soft_maximum(&x, tau).unwrap();
            prop_assert!(s <= max + tau * (x.len() as f64).ln() + 1e-12 * (1.0 + max.abs()));
            let gap = (max - s).abs();
            prop_assert!(gap <= prev + 1e-12 * (1.0 + max.abs()), "tau {} gap {} after {}", tau, gap, prev);
            prev = gap;
        }
        prop_assert!(prev <= 1e-3 * (x.len() as f64).ln().max(1.0) + 1e-12);
        // Permutation invariance.
        let mut y = x.clone();
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for tau in [0.01, 0.1, 1.0] {
            let (a, b) = (soft_maximum(&x, tau).unwrap(), soft_maximum(&y, tau).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
        Ok(())
    });
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => Outcome::new(secs < 10.0, format!("2000 random cases, {secs:.2} s")),
        Err(e) => Outcome::new(false, format!("{e}")),
    }
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worse = 0;
    let mut init_kept = true;
    for inst in 0..100u64 {
        let g = random_small_graph(&mut rng);
        let g = if g.node_count() < 4 { ring(5) } else { g };
        let d = DemandVector::new((0..g.pair_count()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let init = WeightVector::new((0..g.edge_count()).map(|_| rng.gen_range(0.5..3.0)).collect()).unwrap();
        let budget = rng.gen_range(5..60);
        let run = |evals: u64| {
            let cfg = SearchConfig {
                budget: Budget::Evaluations(evals),
                seed: inst,
                ..SearchConfig::default()
            };
            local_search(&g, &d, &init, &cfg).unwrap()
        };
        if run(2 * budget).max_util > run(budget).max_util {
            worse += 1;
        }
        let zero = run(0);
        init_kept &= zero.weights == init;
        let zero_ms = local_search(
            &g,
            &d,
            &init,
            &SearchConfig {
                budget: Budget::millis(0),
                ..SearchConfig::default()
            },
        )
        .unwrap();
        init_kept &= zero_ms.weights == init;
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worse == 0 && init_kept && secs < 60.0,
        format!("100 paired instances, {worse} worsened by doubling; budget 0 returns init: {init_kept}; {secs:.2} s"),
    )
}

fn mask_wall_ms(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|l| match l.rsplit_once(',') {
            Some((head, _)) => head.to_string(),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = GnnModel::new(
        GnnConfig {
            hidden: 8,
            rounds: 3,
            shared_processor: false,
        },
        3,
    )
    .unwrap();
    model.save(&dir.path().join("model.ckpt")).unwrap();
    let suite = format!(
        r#"{{
  "topologies": ["{}", "{}"],
  "samples": 4,
  "methods": ["default_ospf", "rbb", "ls", "rbb+ls"],
  "model": "model.ckpt",
  "seed": 99,
  "search": {{"budget_evaluations": 150}},
  "calibration": {{"samples": 200}}
}}"#,
        data_dir().join("abilene.txt").display(),
        data_dir().join("polska.txt").display()
    );
    std::fs::write(dir.path().join("suite.json"), suite).unwrap();
    let run = |tag: &str| {
        let out = dir.path().join(format!("records-{tag}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_rbb"))
            .args(["experiment", "--suite"])
            .arg(dir.path().join("suite.json"))
            .arg("--out")
            .arg(&out)
            .arg("--summary")
            .arg(dir.path().join(format!("summary-{tag}.csv")))
            .env("RUST_LOG", "warn")
            .output()
            .expect("run rbb");
        (status.status.code(), std::fs::read_to_string(out).unwrap_or_default())
    };
    let (c1, a) = run("a");
    let (c2, b) = run("b");
    let rows = a.lines().count().saturating_sub(1);
    let same = !a.is_empty() && mask_wall_ms(&a) == mask_wall_ms(&b);
    Outcome::new(
        c1 == Some(0) && c2 == Some(0) && same && rows == 2 * 4 * 4,
        format!("exit codes {c1:?}/{c2:?}, {rows} records, identical with wall_ms masked: {same}"),
    )
}

/// Deterministic 37-node topology with 57 undirected links: a ring plus
/// twenty seeded chords.
fn synthetic_37() -> Graph {
    let n = 37;
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut links: Vec<LinkSpec> = (0..n).map(|i| LinkSpec::undirected(i, (i + 1) % n, 1.0)).collect();
    let mut used: std::collections::HashSet<(usize, usize)> = (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect();
    while links.len() < 57 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && used.insert((a.min(b), a.max(b))) {
            links.push(LinkSpec::undirected(a, b, 1.0));
        }
    }
    Graph::build("synthetic-37", n, &links).unwrap()
}

fn criterion_9(model: &GnnModel) -> Outcome {
    let g = synthetic_37();
    let w = default_ospf_weights(&g);
    let d = rbb::workbench::generate_traffic_matrix(&g, 5, 0.01);
    let mut times = Vec::new();
    for t in 0..3 {
        let started = Instant::now();
        rbb_step(model, &g, &w, &d, &RbbConfig::default(), t).unwrap();
        times.push(started.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[1];
    let _ = std::fs::write(work_dir().join("step_timing.txt"), format!("median_step_seconds,{median}\n"));
    Outcome {
        pass: median < 5.0,
        fatal: false,
        detail: format!(
            "median of 3 steps on {} nodes / {} directed edges: {median:.2} s (limit 5 s; reported, not fatal)",
            g.node_count(),
            g.edge_count()
        ),
    }
}

fn criterion_10(model: &GnnModel, path: &Path, samples: &[TrainingSample], accuracy: f64) -> Outcome {
    let first = std::fs::read(path).unwrap();
    let loaded = GnnModel::load(path).unwrap();
    let second = loaded.save_json().unwrap().into_bytes();
    let bytes_equal = first == second && model.save_json().unwrap().into_bytes() == first;
    let again = edge_accuracy(&loaded, samples).unwrap();
    Outcome::new(
        bytes_equal && again.to_bits() == accuracy.to_bits(),
        format!("save/load/save identical: {bytes_equal}; accuracy {again} vs {accuracy}"),
    )
}

/// `ACCEPTANCE_ONLY=1,6` restricts the run to the listed criteria.
fn selected() -> Option<Vec<usize>> {
    let list = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(list.split(',').filter_map(|x| x.trim().parse().ok()).collect())
}

fn main() {
    rbb::tune_allocator();
    let only = selected();
    let wants = |n: usize| only.as_ref().is_none_or(|l| l.contains(&n));
    let mut lines = Vec::new();
    let mut fatal = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let line = format!("{verdict} criterion {n} [{name}]: {}", o.detail);
        println!("{line}");
        lines.push(line);
        if !o.pass && o.fatal {
            fatal.push(n);
        }
    };
    if wants(1) {
        report(1, "gradient correctness", criterion_1());
    }
    if wants(2) {
        report(2, "exact routing oracle", criterion_2());
    }
    if wants(6) {
        report(6, "soft maximum properties", criterion_6());
    }
    if wants(7) {
        report(7, "anytime local search", criterion_7());
    }
    if wants(8) {
        report(8, "determinism", criterion_8());
    }
    if [3, 4, 5, 9, 10].iter().any(|&n| wants(n)) {
        let (model, path, note) = surrogate();
        if wants(3) || wants(10) {
            let samples = fidelity_samples();
            let (o3, accuracy) = criterion_3(&model, &note, &samples);
            if wants(3) {
                report(3, "surrogate fidelity", o3);
            }
            if wants(10) {
                report(10, "checkpoint round trip", criterion_10(&model, &path, &samples, accuracy));
            }
        }
        if wants(9) {
            report(9, "step timing", criterion_9(&model));
        }
        if wants(4) || wants(5) {
            let (records, failures, secs) = run_suite(&path);
            println!(
                "experiment: {} records over {} topologies in {secs:.0} s (records.csv and summary.csv under target/acceptance)",
                records.len(),
                TOPOLOGIES.len()
            );
            if wants(4) {
                report(4, "TE improvement", criterion_4(&records, failures));
            }
            if wants(5) {
                report(5, "warm start", criterion_5(&records));
            }
        }
    }
    let passed = lines.iter().filter(|l| l.starts_with("PASS")).count();
    let total = format!("acceptance: {passed}/{} criteria passed", lines.len());
    println!("{total}");
    lines.push(total);
    std::fs::write(work_dir().join("summary.txt"), lines.join("\n") + "\n").expect("write summary");
    if !fatal.is_empty() {
        println!("acceptance: failing criteria {fatal:?}");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
