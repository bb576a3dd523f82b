//! The `rbb` command line. [`run`] returns the process exit code:
//! 0 success, 1 usage error, 2 data error, 3 internal error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use super::csvio::{read_traffic, read_weights, write_traffic, write_weights};
use super::experiment::{run_experiment, summarize, write_records, write_summary, SuiteConfig};
use super::traffic::{generate_traffic_matrix, resolve_scale, Scaling, TrafficConfig};
use super::{load_topology, CapacityMode, TopologySpec, WorkbenchError};
use crate::fmt_f64;
use crate::gnn::{GnnConfig, GnnModel};
use crate::localsearch::{local_search, Budget, SearchConfig};
use crate::netgraph::{default_ospf_weights, Graph};
use crate::optimizer::{exact_max_utilization, rbb_optimize, Positivity, RbbConfig};
use crate::trainer::{sample_ba_topology, train_with_progress, validation_samples, GraphSource, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rbb", version, about = "OSPF weight optimization through a learned routing surrogate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write random Barabási-Albert topologies as JSON files.
    GenTopo(GenTopoArgs),
    /// Train the routing surrogate on Dijkstra labels.
    Train(TrainArgs),
    /// Generate a traffic matrix for a topology.
    GenTm(GenTmArgs),
    /// Optimize link weights by gradient descent through the surrogate.
    Optimize(OptimizeArgs),
    /// Print the exact maximum link utilization of a weight setting.
    Evaluate(EvaluateArgs),
    /// Integer-weight local search under a time or evaluation budget.
    Localsearch(LocalsearchArgs),
    /// Run an experiment suite and write per-sample records and a summary.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct TopoArgs {
    /// Topology file: `.json`, or SNDlib native text otherwise.
    #[arg(long)]
    pub topo: PathBuf,
    /// Use the file's link capacities instead of capacity 1 everywhere.
    #[arg(long)]
    pub keep_capacities: bool,
}

#[derive(Debug, Args)]
pub struct GenTopoArgs {
    /// Only `ba` is supported.
    #[arg(long, default_value = "ba")]
    pub model: String,
    /// Node count range `MIN:MAX`, inclusive.
    #[arg(long, default_value = "10:20")]
    pub nodes: String,
    #[arg(long, default_value_t = 2)]
    pub attach: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training topologies; graphs are drawn from this pool.
    #[arg(long, conflicts_with = "online", required_unless_present = "online")]
    pub data: Option<PathBuf>,
    /// Draw a fresh BA graph for every sample.
    #[arg(long)]
    pub online: bool,
    #[arg(long, default_value_t = 8000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub rounds: usize,
    /// Reuse one processor block in every round.
    #[arg(long)]
    pub shared_processor: bool,
    /// Node count range `MIN:MAX` for online graphs.
    #[arg(long, default_value = "10:20")]
    pub nodes: String,
    #[arg(long, default_value_t = 2)]
    pub attach: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory of validation topologies.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub val_samples: usize,
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
    /// Loss and accuracy per step as CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenTmArgs {
    #[command(flatten)]
    pub topo: TopoArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed scale factor.
    #[arg(long, conflicts_with = "calibrate")]
    pub scale: Option<f64>,
    /// Calibration `q=0.5,target=1.1,samples=500`; any key may be omitted.
    /// Used when `--scale` is absent.
    #[arg(long)]
    pub calibrate: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub topo: TopoArgs,
    #[arg(long)]
    pub tm: PathBuf,
    /// Starting weights; default OSPF when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.02)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha_decay: f64,
    /// Descend on log-weights instead of clamping.
    #[arg(long)]
    pub log_space: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step trajectory as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub topo: TopoArgs,
    #[arg(long)]
    pub tm: PathBuf,
    /// Default OSPF when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalsearchArgs {
    #[command(flatten)]
    pub topo: TopoArgs,
    #[arg(long)]
    pub tm: PathBuf,
    /// Default OSPF when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, conflicts_with = "budget_evals")]
    pub budget_ms: Option<u64>,
    #[arg(long)]
    pub budget_evals: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub w_max: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Best objective over time as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub summary: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

pub fn execute(command: Command) -> Result<(), WorkbenchError> {
    match command {
        Command::GenTopo(a) => gen_topo(a),
        Command::Train(a) => train(a),
        Command::GenTm(a) => gen_tm(a),
        Command::Optimize(a) => optimize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Localsearch(a) => localsearch(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), WorkbenchError> {
    let bad = || WorkbenchError::Invalid(format!("expected MIN:MAX, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo: usize = a.trim().parse().map_err(|_| bad())?;
    let hi: usize = b.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn parse_calibration(s: &str) -> Result<Scaling, WorkbenchError> {
    let Scaling::Calibrate {
        mut quantile,
        mut target,
        mut samples,
    } = Scaling::default()
    else {
        unreachable!()
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || WorkbenchError::Invalid(format!("bad calibration setting {part:?}"));
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "q" => quantile = v.trim().parse().map_err(|_| bad())?,
            "target" => target = v.trim().parse().map_err(|_| bad())?,
            "samples" => samples = v.trim().parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    Ok(Scaling::Calibrate {
        quantile,
        target,
        samples,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, WorkbenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>, WorkbenchError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| WorkbenchError::Invalid(format!("{}: {e}", path.display())))
}

struct Loaded {
    spec: TopologySpec,
    ids: Vec<String>,
    graph: Graph,
}

fn load(t: &TopoArgs) -> Result<Loaded, WorkbenchError> {
    let spec = load_topology(&t.topo)?;
    let mode = if t.keep_capacities {
        CapacityMode::FromFile
    } else {
        CapacityMode::Unit
    };
    let graph = spec.to_graph(mode)?;
    Ok(Loaded {
        ids: spec.node_ids(),
        spec,
        graph,
    })
}

/// Topology files in `dir`, sorted by name.
fn topology_files(dir: &Path) -> Result<Vec<PathBuf>, WorkbenchError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| WorkbenchError::Invalid(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(WorkbenchError::Invalid(format!("{} has no topology files", dir.display())));
    }
    Ok(files)
}

fn load_dir(dir: &Path) -> Result<Vec<Arc<Graph>>, WorkbenchError> {
    topology_files(dir)?
        .iter()
        .map(|p| Ok(Arc::new(load_topology(p)?.to_graph(CapacityMode::Unit)?)))
        .collect()
}

fn gen_topo(a: GenTopoArgs) -> Result<(), WorkbenchError> {
    if a.model != "ba" {
        return Err(WorkbenchError::UnsupportedFeature(format!("topology model {:?}", a.model)));
    }
    let (lo, hi) = parse_range(&a.nodes)?;
    std::fs::create_dir_all(&a.out)?;
    let width = a.count.max(1).to_string().len();
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let n = lo + (seed as usize % (hi - lo + 1));
        let mut spec = TopologySpec::from_graph(&sample_ba_topology(n, a.attach, seed)?);
        spec.name = format!("ba-{i:0width$}");
        std::fs::write(a.out.join(format!("{}.json", spec.name)), spec.to_json())?;
    }
    println!("wrote {} topologies to {}", a.count, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), WorkbenchError> {
    let (min_nodes, max_nodes) = parse_range(&a.nodes)?;
    let source = match &a.data {
        Some(dir) => GraphSource::Pool(load_dir(dir)?),
        None => GraphSource::Online,
    };
    let config = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        learning_rate: a.lr,
        min_nodes,
        max_nodes,
        attach: a.attach,
        seed: a.seed,
        eval_every: a.eval_every,
        source,
        ..TrainConfig::default()
    };
    let validation = match &a.val {
        Some(dir) => validation_samples(&load_dir(dir)?, a.val_samples, &config.prior, a.seed ^ 0x5eed)?,
        None => Vec::new(),
    };
    let mut model = GnnModel::new(
        GnnConfig {
            hidden: a.hidden,
            rounds: a.rounds,
            shared_processor: a.shared_processor,
        },
        a.seed,
    )?;
    let history = train_with_progress(&mut model, &config, &validation, |row| {
        if let Some(acc) = row.accuracy {
            info!("step {} loss {:.5} accuracy {:.4}", row.step, row.loss, acc);
        }
    })?;
    model.save(&a.out)?;
    if let Some(path) = &a.metrics {
        history.write_csv(create(path)?)?;
    }
    let last = history.rows.last().expect("at least one step");
    match history.accuracies().last() {
        Some((_, acc)) => println!("final loss {} validation accuracy {}", fmt_f64(last.loss), fmt_f64(*acc)),
        None => println!("final loss {}", fmt_f64(last.loss)),
    }
    Ok(())
}

fn gen_tm(a: GenTmArgs) -> Result<(), WorkbenchError> {
    let t = load(&a.topo)?;
    let scaling = match (a.scale, &a.calibrate) {
        (Some(s), _) => Scaling::Fixed(s),
        (None, Some(c)) => parse_calibration(c)?,
        (None, None) => Scaling::default(),
    };
    let config = TrafficConfig {
        seed: a.seed,
        scaling,
    };
    let (scale, cal) = resolve_scale(&t.graph, &config)?;
    let d = generate_traffic_matrix(&t.graph, a.seed, scale);
    write_traffic(create(&a.out)?, &t.graph, &t.ids, &d)?;
    if let Some(c) = cal {
        println!(
            "{}: scale {} (q = {}, target = {}, achieved {})",
            t.spec.name,
            fmt_f64(c.scale),
            c.quantile,
            c.target,
            fmt_f64(c.achieved)
        );
    }
    Ok(())
}

fn optimize(a: OptimizeArgs) -> Result<(), WorkbenchError> {
    let model = GnnModel::load(&a.model)?;
    let t = load(&a.topo)?;
    let d = read_traffic(open(&a.tm)?, &t.graph, &t.ids)?;
    let w0 = match &a.init {
        Some(p) => read_weights(open(p)?, &t.graph, &t.ids)?,
        None => default_ospf_weights(&t.graph),
    };
    let config = RbbConfig {
        tau: a.tau,
        alpha: a.alpha,
        steps: a.steps,
        alpha_decay: a.alpha_decay,
        positivity: if a.log_space {
            Positivity::LogSpace
        } else {
            Positivity::Clamp
        },
        ..RbbConfig::default()
    };
    let out = rbb_optimize(&model, &t.graph, &w0, &d, &config)?;
    write_weights(create(&a.out)?, &t.graph, &t.ids, &out.recommended)?;
    if let Some(p) = &a.trace {
        out.trajectory.write_csv(create(p)?)?;
    }
    let initial = out.trajectory.points[0].exact_max_util;
    println!(
        "max utilization {} -> {} (step {})",
        fmt_f64(initial),
        fmt_f64(out.recommended_max_util),
        out.best_step
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), WorkbenchError> {
    let t = load(&a.topo)?;
    let d = read_traffic(open(&a.tm)?, &t.graph, &t.ids)?;
    let w = match &a.weights {
        Some(p) => read_weights(open(p)?, &t.graph, &t.ids)?,
        None => default_ospf_weights(&t.graph),
    };
    println!("{}", fmt_f64(exact_max_utilization(&t.graph, &w, &d)?));
    Ok(())
}

fn localsearch(a: LocalsearchArgs) -> Result<(), WorkbenchError> {
    let t = load(&a.topo)?;
    let d = read_traffic(open(&a.tm)?, &t.graph, &t.ids)?;
    let init = match &a.init {
        Some(p) => read_weights(open(p)?, &t.graph, &t.ids)?,
        None => default_ospf_weights(&t.graph),
    };
    let budget = match a.budget_evals {
        Some(n) => Budget::Evaluations(n),
        None => Budget::millis(a.budget_ms.unwrap_or(1000)),
    };
    let config = SearchConfig {
        budget,
        w_max: a.w_max,
        seed: a.seed,
        ..SearchConfig::default()
    };
    let r = local_search(&t.graph, &d, &init, &config)?;
    write_weights(create(&a.out)?, &t.graph, &t.ids, &r.weights)?;
    if let Some(p) = &a.trace {
        r.write_trace_csv(create(p)?)?;
    }
    println!("max utilization {} after {} evaluations", fmt_f64(r.max_util), r.evaluations);
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<(), WorkbenchError> {
    let text = std::fs::read_to_string(&a.suite)
        .map_err(|e| WorkbenchError::Invalid(format!("{}: {e}", a.suite.display())))?;
    let suite = SuiteConfig::from_json(&text)?;
    let base = a.suite.parent().unwrap_or(Path::new("."));
    let out = run_experiment(&suite, base)?;
    write_records(create(&a.out)?, &out.records)?;
    let summary = summarize(&out);
    write_summary(create(&a.summary)?, &summary)?;
    for f in &out.failures {
        eprintln!("warning: {} sample {} failed: {}", f.topology, f.sample, f.error);
    }
    let mut stdout = std::io::stdout().lock();
    for r in &summary {
        writeln!(
            stdout,
            "{} {}: improvement {:.4}, beats default {:.4}, below one {:.4}",
            r.topology, r.method, r.mean_relative_improvement, r.fraction_beats_default, r.fraction_below_one
        )?;
    }
    Ok(())
}
