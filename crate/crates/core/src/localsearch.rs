//! Anytime local search over integer link weights, minimizing the exact
//! maximum utilization.
//!
//! Moves change one link weight to a uniformly drawn new value. Half of the
//! moves pick the link uniformly, half among the links at maximum
//! utilization. A candidate replaces the current point when it lowers
//! `(max utilization, sum of squared utilizations)` lexicographically; the
//! second key lets the search walk across plateaus of the maximum. Recently
//! tried `(link, weight)` moves are tabu, and a long run without progress
//! restarts from a perturbed copy of the best point.

use std::collections::{HashSet, VecDeque};
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exact_routing::{routing_matrix, RoutingError};
use crate::netgraph::{utilization, DemandVector, Graph, GraphError, WeightVector};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// When the search stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    WallClock(Duration),
    /// Number of candidate evaluations; makes runs reproducible.
    Evaluations(u64),
}

impl Budget {
    pub fn millis(ms: u64) -> Self {
        Budget::WallClock(Duration::from_millis(ms))
    }

    fn is_zero(&self) -> bool {
        match self {
            Budget::WallClock(d) => d.is_zero(),
            Budget::Evaluations(n) => *n == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub budget: Budget,
    /// Integer weights range over `1..=w_max`.
    pub w_max: u32,
    pub seed: u64,
    /// Tabu tenure in proposals; `None` means `2 · n_e`.
    pub tabu_tenure: Option<usize>,
    /// Proposals without improvement before a restart; `None` means
    /// `4 · n_e`.
    pub stall_limit: Option<usize>,
    /// Fraction of links re-drawn on restart (at least one).
    pub perturb_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: Budget::millis(1000),
            w_max: 64,
            seed: 0,
            tabu_tenure: None,
            stall_limit: None,
            perturb_fraction: 0.1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.w_max < 2 || !(0.0..=1.0).contains(&self.perturb_fraction) {
            return Err(SearchError::InvalidConfig(format!(
                "w_max = {}, perturb_fraction = {}",
                self.w_max, self.perturb_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub time_ms: f64,
    pub evaluation: u64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: WeightVector,
    pub max_util: f64,
    pub evaluations: u64,
    /// Best-so-far objective after each improvement; non-increasing.
    pub trace: Vec<TracePoint>,
    /// True when the unquantized initialization was kept.
    pub kept_init: bool,
}

impl SearchResult {
    /// CSV `time_ms,objective`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<(), SearchError> {
        let io = |e: csv::Error| SearchError::Io(std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_ms", "objective"]).map_err(io)?;
        for p in &self.trace {
            w.write_record([crate::fmt_f64(p.time_ms), crate::fmt_f64(p.objective)])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maps continuous weights onto `1..=w_max`, scaling so the largest weight
/// lands at `w_max / 2`. Ratios survive up to rounding, which keeps
/// shortest paths close to those of the input.
pub fn quantize(w: &WeightVector, w_max: u32) -> Vec<u32> {
    let top = w.values().iter().copied().fold(0.0f64, f64::max);
    let scale = f64::from(w_max / 2) / top;
    w.values()
        .iter()
        .map(|&x| ((x * scale).round() as i64).clamp(1, i64::from(w_max)) as u32)
        .collect()
}

fn to_weights(q: &[u32]) -> WeightVector {
    WeightVector::new(q.iter().map(|&x| f64::from(x)).collect()).expect("integer weights are >= 1")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Score {
    max: f64,
    spread: f64,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        self.max < other.max || (self.max == other.max && self.spread < other.spread)
    }
}

fn score(g: &Graph, w: &WeightVector, d: &DemandVector) -> Result<(Score, Vec<f64>), SearchError> {
    let p = routing_matrix(g, w)?;
    let rho = utilization(g, &p, d)?;
    let max = rho.max()?;
    let spread = rho.values().iter().map(|r| r * r).sum();
    Ok((Score { max, spread }, rho.values().to_vec()))
}

/// Links whose utilization equals the maximum.
fn hottest(rho: &[f64]) -> Vec<usize> {
    let max = rho.iter().copied().fold(f64::MIN, f64::max);
    (0..rho.len()).filter(|&k| rho[k] == max).collect()
}

struct Clock {
    start: Instant,
    budget: Budget,
    evaluations: u64,
}

impl Clock {
    fn exhausted(&self) -> bool {
        match self.budget {
            Budget::WallClock(d) => self.start.elapsed() >= d,
            Budget::Evaluations(n) => self.evaluations >= n,
        }
    }

    fn ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

/// Searches integer weights starting from `init` (quantized), returning the
/// best point found, or `init` itself when nothing beats it.
pub fn local_search(
    g: &Graph,
    d: &DemandVector,
    init: &WeightVector,
    config: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    init.check_for(g)?;
    d.check_for(g)?;
    let mut clock = Clock {
        start: Instant::now(),
        budget: config.budget,
        evaluations: 0,
    };
    let (init_score, _) = score(g, init, d)?;
    let mut trace = vec![TracePoint {
        time_ms: clock.ms(),
        evaluation: 0,
        objective: init_score.max,
    }];
    let keep_init = |trace, evaluations| SearchResult {
        weights: init.clone(),
        max_util: init_score.max,
        evaluations,
        trace,
        kept_init: true,
    };
    if config.budget.is_zero() {
        return Ok(keep_init(trace, 0));
    }

    let n_e = g.edge_count();
    let tenure = config.tabu_tenure.unwrap_or(2 * n_e).max(1);
    let stall_limit = config.stall_limit.unwrap_or(4 * n_e).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut cur = quantize(init, config.w_max);
    let (mut cur_score, mut cur_rho) = score(g, &to_weights(&cur), d)?;
    clock.evaluations += 1;
    let mut best = cur.clone();
    let mut best_score = cur_score;
    let record = |trace: &mut Vec<TracePoint>, s: &Score, clock: &Clock| {
        if s.max < trace.last().expect("seeded").objective {
            trace.push(TracePoint {
                time_ms: clock.ms(),
                evaluation: clock.evaluations,
                objective: s.max,
            });
        }
    };
    record(&mut trace, &cur_score, &clock);

    let mut tabu: VecDeque<(usize, u32)> = VecDeque::with_capacity(tenure + 1);
    let mut tabu_set: HashSet<(usize, u32)> = HashSet::with_capacity(tenure + 1);
    let mut stall = 0usize;
    while !clock.exhausted() {
        let link = if rng.gen_bool(0.5) {
            rng.gen_range(0..n_e)
        } else {
            let hot = hottest(&cur_rho);
            hot[rng.gen_range(0..hot.len())]
        };
        let mut value = rng.gen_range(1..config.w_max);
        if value >= cur[link] {
            value += 1;
        }
        stall += 1;
        if !tabu_set.contains(&(link, value)) {
            tabu.push_back((link, value));
            tabu_set.insert((link, value));
            if tabu.len() > tenure {
                let old = tabu.pop_front().expect("non-empty");
                tabu_set.remove(&old);
            }
            let mut cand = cur.clone();
            cand[link] = value;
            let (s, rho) = score(g, &to_weights(&cand), d)?;
            clock.evaluations += 1;
            if s.better_than(&cur_score) {
                cur = cand;
                cur_score = s;
                cur_rho = rho;
                stall = 0;
                if s.better_than(&best_score) {
                    best = cur.clone();
                    best_score = s;
                    record(&mut trace, &s, &clock);
                }
            }
        }
        if stall >= stall_limit && !clock.exhausted() {
            cur = best.clone();
            let count = ((n_e as f64 * config.perturb_fraction).round() as usize).max(1);
            for _ in 0..count {
                let k = rng.gen_range(0..n_e);
                cur[k] = rng.gen_range(1..=config.w_max);
            }
            (cur_score, cur_rho) = score(g, &to_weights(&cur), d)?;
            clock.evaluations += 1;
            if cur_score.better_than(&best_score) {
                best = cur.clone();
                best_score = cur_score;
                record(&mut trace, &cur_score, &clock);
            }
            stall = 0;
        }
    }

    if best_score.max < init_score.max {
        Ok(SearchResult {
            weights: to_weights(&best),
            max_util: best_score.max,
            evaluations: clock.evaluations,
            trace,
            kept_init: false,
        })
    } else {
        Ok(keep_init(trace, clock.evaluations))
    }
}
