//! Monte Carlo benchmarking: ARL and EDD estimation, threshold calibration,
//! and experiment drivers comparing the cascade detector against baselines.
//!
//! Calibration uses common random numbers: each trial's statistic trace is
//! computed once and reused for every candidate threshold, so ARL estimates
//! are exactly nondecreasing in the threshold.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{window_glr_node, CusumBank};
use crate::detector::{CascadeDetector, DetectorConfig};
use crate::error::{Error, Result};
use crate::sim::{gen_measurements, sample_cascade, FailureTimes, MeasurementPanel, PostChangeParams};
use crate::topology::{load_edge_list, parse_matpower_branches, Graph, InfluenceMatrix};

/// Sequential detector interface shared by the proposed method and the
/// baselines: feed ticks, read back a scalar statistic.
pub trait StatDetector {
    /// Method label used in reports.
    fn name(&self) -> &str;
    /// Ticks consumed before the first statistic; the first statistic
    /// appears at tick `warmup() + 1`.
    fn warmup(&self) -> u64;
    /// Clears state; `seed` drives any internal randomness.
    fn reset(&mut self, seed: u64);
    /// Consumes one tick, returning the statistic once available.
    fn step(&mut self, row: &[f64]) -> Option<f64>;
}

/// The cascade detector behind the [`StatDetector`] interface.
pub struct ProposedDetector {
    inner: CascadeDetector,
    label: String,
}

impl ProposedDetector {
    pub fn new(graph: Graph, alpha: InfluenceMatrix, config: DetectorConfig) -> Result<Self> {
        let inner = CascadeDetector::new(graph, alpha, config)?;
        Ok(ProposedDetector { inner, label: "proposed".to_string() })
    }
}

impl StatDetector for ProposedDetector {
    fn name(&self) -> &str {
        &self.label
    }

    fn warmup(&self) -> u64 {
        self.inner.config().window_len as u64 - 1
    }

    fn reset(&mut self, seed: u64) {
        self.inner.reset(seed);
    }

    fn step(&mut self, row: &[f64]) -> Option<f64> {
        self.inner.step(row)
    }
}

/// Per-node CuSum bank reduced by the top-eta sum; `eta = 1` is the plain
/// max-CuSum chart.
pub struct MultichartDetector {
    bank: CusumBank,
    eta: usize,
    label: String,
}

impl MultichartDetector {
    pub fn new(n: usize, mu1: f64, eta: usize, label: String) -> Self {
        assert!(eta >= 1 && eta <= n, "eta out of range");
        MultichartDetector { bank: CusumBank::new(n, mu1), eta, label }
    }
}

impl StatDetector for MultichartDetector {
    fn name(&self) -> &str {
        &self.label
    }

    fn warmup(&self) -> u64 {
        0
    }

    fn reset(&mut self, _seed: u64) {
        self.bank.reset();
    }

    fn step(&mut self, row: &[f64]) -> Option<f64> {
        self.bank.step(row);
        Some(self.bank.top_sum(self.eta))
    }
}

/// Max over nodes of the windowed per-node GLR.
pub struct WindowGlrDetector {
    n: usize,
    len: usize,
    sigma_floor: f64,
    /// Node-major ring of the last `len` ticks.
    ring: Vec<f64>,
    ticks_seen: u64,
    label: String,
}

impl WindowGlrDetector {
    pub fn new(n: usize, len: usize, sigma_floor: f64, label: String) -> Self {
        assert!(len >= 2, "window too short");
        WindowGlrDetector { n, len, sigma_floor, ring: vec![0.0; n * len], ticks_seen: 0, label }
    }
}

impl StatDetector for WindowGlrDetector {
    fn name(&self) -> &str {
        &self.label
    }

    fn warmup(&self) -> u64 {
        self.len as u64 - 1
    }

    fn reset(&mut self, _seed: u64) {
        self.ring.iter_mut().for_each(|v| *v = 0.0);
        self.ticks_seen = 0;
    }

    fn step(&mut self, row: &[f64]) -> Option<f64> {
        assert_eq!(row.len(), self.n, "row width mismatch");
        let slot = (self.ticks_seen as usize) % self.len;
        for (i, &v) in row.iter().enumerate() {
            self.ring[i * self.len + slot] = v;
        }
        self.ticks_seen += 1;
        if self.ticks_seen < self.len as u64 {
            return None;
        }
        let start = (self.ticks_seen as usize - self.len) % self.len;
        let mut best = f64::NEG_INFINITY;
        let mut row_buf = vec![0.0; self.len];
        for i in 0..self.n {
            let ring_row = &self.ring[i * self.len..(i + 1) * self.len];
            for c in 0..self.len {
                row_buf[c] = ring_row[(start + c) % self.len];
            }
            best = best.max(window_glr_node(&row_buf, self.sigma_floor));
        }
        Some(best)
    }
}

/// Where the experiment's graph comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSource {
    Complete { n: usize },
    Star { n: usize },
    /// Edge-list CSV with rates; `alpha0` is ignored.
    EdgeList { path: String },
    /// MATPOWER case file; optionally reduced to a connected subgraph of
    /// `subgraph` nodes grown from the first bus.
    Matpower {
        path: String,
        #[serde(default)]
        subgraph: Option<usize>,
    },
}

/// Pre-change data model for ARL estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NullModel {
    /// Every node N(0,1) throughout.
    PureNoise,
    /// `count` nodes (drawn fresh each trial) carry the post-change law
    /// from tick 1; the rest stay N(0,1).
    Contaminated { count: usize },
}

/// One detector entry in an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Proposed { config: DetectorConfig },
    /// Max-of-per-node exact or misspecified CuSum.
    Cusum { mu1: f64 },
    MultichartCusum { mu1: f64, eta: usize },
    WindowGlr {
        #[serde(rename = "L")]
        window_len: usize,
        #[serde(default = "crate::likelihood::default_sigma_floor_value")]
        sigma_floor: f64,
    },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Proposed { .. } => "proposed".to_string(),
            MethodSpec::Cusum { mu1 } => format!("cusum_mu{mu1}"),
            MethodSpec::MultichartCusum { mu1, eta } => format!("multichart_mu{mu1}_eta{eta}"),
            MethodSpec::WindowGlr { window_len, .. } => format!("glr_L{window_len}"),
        }
    }

    pub fn build(&self, graph: &Graph, alpha: &InfluenceMatrix) -> Result<Box<dyn StatDetector>> {
        let n = graph.node_count();
        Ok(match self {
            MethodSpec::Proposed { config } => Box::new(ProposedDetector::new(
                graph.clone(),
                alpha.clone(),
                config.clone(),
            )?),
            MethodSpec::Cusum { mu1 } => {
                Box::new(MultichartDetector::new(n, *mu1, 1, self.label()))
            }
            MethodSpec::MultichartCusum { mu1, eta } => {
                if *eta < 1 || *eta > n {
                    return Err(Error::InvalidConfig(format!(
                        "multichart eta {eta} out of range for {n} nodes"
                    )));
                }
                Box::new(MultichartDetector::new(n, *mu1, *eta, self.label()))
            }
            MethodSpec::WindowGlr { window_len, sigma_floor } => {
                if !(sigma_floor.is_finite() && *sigma_floor > 0.0) {
                    return Err(Error::InvalidConfig("sigma_floor must be positive".into()));
                }
                Box::new(WindowGlrDetector::new(n, *window_len, *sigma_floor, self.label()))
            }
        })
    }
}

/// Full experiment protocol: graph, data model, methods, budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub graph: GraphSource,
    /// Uniform influence rate; required unless the graph source carries
    /// rates.
    #[serde(default)]
    pub alpha0: Option<f64>,
    pub post_mean: f64,
    pub post_std: f64,
    pub null_model: NullModel,
    /// First failure time for EDD trials (absolute tick).
    pub seed_tick: u64,
    /// 1-based seed node for EDD trials; absent means a fresh uniform draw
    /// per trial.
    #[serde(default)]
    pub seed_node: Option<usize>,
    pub trials: usize,
    /// Tick budget per ARL trial.
    pub run_cap: u64,
    /// Tick budget per EDD trial.
    pub edd_cap: u64,
    pub target_arl: f64,
    #[serde(default = "default_arl_tol")]
    pub arl_tol: f64,
    /// Extra ARL targets, each adding one frontier row per method.
    #[serde(default)]
    pub frontier_targets: Vec<f64>,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
}

fn default_arl_tol() -> f64 {
    0.1
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the graph and rates this spec describes.
    pub fn build_graph(&self) -> Result<(Graph, InfluenceMatrix)> {
        let need_alpha = |g: Graph| -> Result<(Graph, InfluenceMatrix)> {
            let a0 = self.alpha0.ok_or_else(|| {
                Error::InvalidConfig("alpha0 required for this graph source".into())
            })?;
            let alpha = InfluenceMatrix::uniform(&g, a0)?;
            Ok((g, alpha))
        };
        match &self.graph {
            GraphSource::Complete { n } => need_alpha(Graph::complete(*n)),
            GraphSource::Star { n } => need_alpha(Graph::star(*n)?),
            GraphSource::EdgeList { path } => {
                let file = std::fs::File::open(path)?;
                load_edge_list(std::io::BufReader::new(file))
            }
            GraphSource::Matpower { path, subgraph } => {
                let text = std::fs::read_to_string(path)?;
                let topo = parse_matpower_branches(&text)?;
                let graph = match subgraph {
                    Some(count) => topo.graph.bfs_subgraph(0, *count)?.0,
                    None => topo.graph,
                };
                need_alpha(graph)
            }
        }
    }

    /// Validates protocol consistency against the built graph.
    pub fn validate(&self, graph: &Graph, alpha: &InfluenceMatrix) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        let n = graph.node_count();
        if self.trials < 1 {
            return fail("trials must be at least 1".into());
        }
        if self.methods.is_empty() {
            return fail("at least one method required".into());
        }
        if !(self.post_std.is_finite() && self.post_std > 0.0) {
            return fail(format!("post_std must be positive, got {}", self.post_std));
        }
        if !self.post_mean.is_finite() {
            return fail("post_mean must be finite".into());
        }
        if !(self.arl_tol.is_finite() && self.arl_tol > 0.0) {
            return fail("arl_tol must be positive".into());
        }
        if let Some(node) = self.seed_node {
            if node < 1 || node > n {
                return fail(format!("seed node {node} out of range for {n} nodes"));
            }
        }
        if let NullModel::Contaminated { count } = self.null_model {
            if count >= n {
                return fail(format!("contaminated count {count} must be below n={n}"));
            }
        }
        let mut max_warmup = 0u64;
        for method in &self.methods {
            let det = method.build(graph, alpha)?;
            max_warmup = max_warmup.max(det.warmup());
        }
        if self.run_cap <= max_warmup + 1 {
            return fail(format!(
                "run_cap {} leaves no room past warmup {max_warmup}",
                self.run_cap
            ));
        }
        for &target in std::iter::once(&self.target_arl).chain(&self.frontier_targets) {
            if !(target > (max_warmup + 1) as f64 && target < self.run_cap as f64) {
                return fail(format!(
                    "target ARL {target} must lie inside ({}, {})",
                    max_warmup + 1,
                    self.run_cap
                ));
            }
        }
        if self.seed_tick <= max_warmup {
            return fail(format!(
                "seed tick {} precedes the first statistic at {}",
                self.seed_tick,
                max_warmup + 1
            ));
        }
        if self.edd_cap <= self.seed_tick {
            return fail(format!(
                "edd_cap {} must exceed the seed tick {}",
                self.edd_cap, self.seed_tick
            ));
        }
        Ok(())
    }
}

/// Mean with standard error and censoring bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub trials: usize,
    pub censored: usize,
}

impl Estimate {
    pub fn censored_frac(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.censored as f64 / self.trials as f64
        }
    }
}

/// Welford accumulator with order-independent merging.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: RunningStats) -> RunningStats {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        RunningStats { n, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Standard error of the mean; zero below two samples.
    pub fn se(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / ((self.n - 1) as f64 * self.n as f64)).sqrt()
    }
}

/// Compressed statistic trajectory of one trial: the ticks where the
/// running maximum increased, with the new maximum. Sufficient to recover
/// the first crossing time of any threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct StatTrace {
    /// `(tick, running_max)` pairs; both coordinates strictly increasing.
    records: Vec<(u64, f64)>,
    last_tick: u64,
}

impl StatTrace {
    pub fn last_tick(&self) -> u64 {
        self.last_tick
    }

    pub fn records(&self) -> &[(u64, f64)] {
        &self.records
    }

    /// First tick whose statistic exceeds `b`, if any.
    pub fn first_crossing(&self, b: f64) -> Option<u64> {
        let idx = self.records.partition_point(|&(_, v)| v <= b);
        self.records.get(idx).map(|&(t, _)| t)
    }
}

/// Runs a detector over a panel, keeping only running-max record points.
pub fn collect_trace(
    det: &mut dyn StatDetector,
    panel: &MeasurementPanel,
    cap: u64,
    seed: u64,
) -> StatTrace {
    det.reset(seed);
    let mut records = Vec::new();
    let mut running = f64::NEG_INFINITY;
    let cap = cap.min(panel.ticks() as u64);
    for t in 0..cap {
        if let Some(stat) = det.step(panel.tick_row(t as usize)) {
            debug_assert!(!stat.is_nan(), "statistic is NaN at tick {}", t + 1);
            if stat > running {
                running = stat;
                records.push((t + 1, stat));
            }
        }
    }
    StatTrace { records, last_tick: cap }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-trial seed derivation.
fn trial_seed(base: u64, phase: u64, trial: u64) -> u64 {
    splitmix64(base ^ splitmix64(phase ^ splitmix64(trial)))
}

const PHASE_NULL: u64 = 1;
const PHASE_CHANGE: u64 = 2;
const PHASE_SEARCH: u64 = 3;

/// Draws one pre-change stream per the spec's null model.
pub fn gen_null_panel(
    spec: &ExperimentSpec,
    graph: &Graph,
    trial: u64,
) -> Result<MeasurementPanel> {
    let n = graph.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(spec.seed, PHASE_NULL, trial));
    let params = PostChangeParams::uniform(n, spec.post_mean, spec.post_std)?;
    let times = match spec.null_model {
        NullModel::PureNoise => FailureTimes::all_infinite(n),
        NullModel::Contaminated { count } => {
            // partial Fisher-Yates: `count` distinct nodes affected from tick 1
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..count {
                let j = rng.gen_range(i..n);
                pool.swap(i, j);
            }
            let mut t = vec![f64::INFINITY; n];
            for &x in &pool[..count] {
                t[x] = 1.0;
            }
            FailureTimes::from_vec(t)?
        }
    };
    gen_measurements(&times, &params, spec.run_cap as usize, &mut rng)
}

/// Draws one post-change stream: cascade seeded at `seed_tick`, panel over
/// `edd_cap` ticks.
pub fn gen_change_panel(
    spec: &ExperimentSpec,
    graph: &Graph,
    alpha: &InfluenceMatrix,
    trial: u64,
) -> Result<(MeasurementPanel, FailureTimes)> {
    let n = graph.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(spec.seed, PHASE_CHANGE, trial));
    let seed_node = match spec.seed_node {
        Some(node) => node - 1,
        None => rng.gen_range(0..n),
    };
    let times = sample_cascade(
        graph,
        alpha,
        seed_node,
        spec.seed_tick as f64,
        spec.edd_cap as f64,
        &mut rng,
    )?;
    let params = PostChangeParams::uniform(n, spec.post_mean, spec.post_std)?;
    let panel = gen_measurements(&times, &params, spec.edd_cap as usize, &mut rng)?;
    Ok((panel, times))
}

/// Null-model statistic traces for every trial, in trial order.
pub fn collect_null_traces(
    method: &MethodSpec,
    spec: &ExperimentSpec,
    graph: &Graph,
    alpha: &InfluenceMatrix,
) -> Result<Vec<StatTrace>> {
    (0..spec.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut det = method.build(graph, alpha)?;
            let panel = gen_null_panel(spec, graph, trial)?;
            let seed = trial_seed(spec.seed, PHASE_SEARCH, trial);
            Ok(collect_trace(det.as_mut(), &panel, spec.run_cap, seed))
        })
        .collect()
}

/// ARL at threshold `b` from precomputed traces: censored trials contribute
/// the cap.
pub fn arl_at_threshold(traces: &[StatTrace], b: f64, cap: u64) -> Estimate {
    let mut stats = RunningStats::default();
    let mut censored = 0usize;
    for trace in traces {
        match trace.first_crossing(b) {
            Some(t) => stats.push(t.min(cap) as f64),
            None => {
                censored += 1;
                stats.push(cap as f64);
            }
        }
    }
    Estimate { mean: stats.mean(), se: stats.se(), trials: traces.len(), censored }
}

/// Direct ARL estimate: fresh null streams, early-stopped at the alarm.
pub fn estimate_arl(
    det: &mut dyn StatDetector,
    spec: &ExperimentSpec,
    graph: &Graph,
    b: f64,
) -> Result<Estimate> {
    let mut stats = RunningStats::default();
    let mut censored = 0usize;
    for trial in 0..spec.trials as u64 {
        let panel = gen_null_panel(spec, graph, trial)?;
        let seed = trial_seed(spec.seed, PHASE_SEARCH, trial);
        match run_until_alarm(det, &panel, spec.run_cap, b, seed) {
            Some(t) => stats.push(t as f64),
            None => {
                censored += 1;
                stats.push(spec.run_cap as f64);
            }
        }
    }
    Ok(Estimate { mean: stats.mean(), se: stats.se(), trials: spec.trials, censored })
}

/// Expected detection delay at threshold `b`: mean of
/// `(alarm - seed_tick)+`, censored trials contributing the cap.
pub fn estimate_edd(
    method: &MethodSpec,
    spec: &ExperimentSpec,
    graph: &Graph,
    alpha: &InfluenceMatrix,
    b: f64,
) -> Result<Estimate> {
    let delays: Vec<(f64, bool)> = (0..spec.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut det = method.build(graph, alpha)?;
            let (panel, _) = gen_change_panel(spec, graph, alpha, trial)?;
            let seed = trial_seed(spec.seed, PHASE_SEARCH, trial ^ 0x00DD);
            let alarm = run_until_alarm(det.as_mut(), &panel, spec.edd_cap, b, seed);
            let (tick, censored) = match alarm {
                Some(t) => (t, false),
                None => (spec.edd_cap, true),
            };
            let delay = tick.saturating_sub(spec.seed_tick) as f64;
            Ok((delay, censored))
        })
        .collect::<Result<_>>()?;
    let mut stats = RunningStats::default();
    let mut censored = 0usize;
    for &(delay, was_censored) in &delays {
        stats.push(delay);
        if was_censored {
            censored += 1;
        }
    }
    Ok(Estimate { mean: stats.mean(), se: stats.se(), trials: spec.trials, censored })
}

fn run_until_alarm(
    det: &mut dyn StatDetector,
    panel: &MeasurementPanel,
    cap: u64,
    b: f64,
    seed: u64,
) -> Option<u64> {
    det.reset(seed);
    let cap = cap.min(panel.ticks() as u64);
    for t in 0..cap {
        if let Some(stat) = det.step(panel.tick_row(t as usize)) {
            if stat > b {
                return Some(t + 1);
            }
        }
    }
    None
}

/// Calibration outcome: threshold and its in-sample ARL estimate.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub threshold: f64,
    pub arl: Estimate,
}

/// Finds the threshold whose ARL estimate is closest to `target` on the
/// trace grid, bisecting over the recorded statistic values.
///
/// Fails when even the closest achievable ARL misses `target` by more than
/// `tol * target`. Targets at or below the first evaluable tick return the
/// low bracket (threshold negative infinity).
pub fn calibrate_threshold(
    traces: &[StatTrace],
    cap: u64,
    warmup: u64,
    target: f64,
    tol: f64,
) -> Result<Calibration> {
    assert!(!traces.is_empty(), "no traces to calibrate on");
    assert!(tol > 0.0, "tolerance must be positive");
    let low = Calibration {
        threshold: f64::NEG_INFINITY,
        arl: arl_at_threshold(traces, f64::NEG_INFINITY, cap),
    };
    if target <= (warmup + 1) as f64 {
        return Ok(low);
    }
    let mut values: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.records().iter().map(|&(_, v)| v))
        .collect();
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    // ARL(values[i]) is nondecreasing in i: find the first index at or
    // above the target
    let mut lo = 0usize;
    let mut hi = values.len();
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let est = arl_at_threshold(traces, values[mid], cap);
        if est.mean < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let mut candidates: Vec<Calibration> = Vec::new();
    if lo < values.len() {
        candidates.push(Calibration {
            threshold: values[lo],
            arl: arl_at_threshold(traces, values[lo], cap),
        });
    }
    if lo > 0 {
        candidates.push(Calibration {
            threshold: values[lo - 1],
            arl: arl_at_threshold(traces, values[lo - 1], cap),
        });
    } else {
        candidates.push(low);
    }
    let best = candidates
        .into_iter()
        .min_by(|a, b| {
            (a.arl.mean - target)
                .abs()
                .partial_cmp(&(b.arl.mean - target).abs())
                .unwrap()
        })
        .expect("candidate list is nonempty");
    if (best.arl.mean - target).abs() > tol * target {
        return Err(Error::InvalidData(format!(
            "calibration missed: closest ARL {} vs target {target} (tol {tol})",
            best.arl.mean
        )));
    }
    Ok(best)
}

/// One line of a benchmark report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub threshold: f64,
    pub arl: f64,
    pub arl_se: f64,
    pub edd: f64,
    pub edd_se: f64,
    /// Censored fraction pooled over the ARL and EDD trials behind this
    /// row.
    pub censored_frac: f64,
}

/// Benchmark results, one row per method and ARL target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn write_csv(&self, mut writer: impl Write) -> Result<()> {
        writeln!(writer, "method,threshold,arl,arl_se,edd,edd_se,censored_frac")?;
        for r in &self.rows {
            writeln!(
                writer,
                "{},{},{},{},{},{},{}",
                r.method, r.threshold, r.arl, r.arl_se, r.edd, r.edd_se, r.censored_frac
            )?;
        }
        Ok(())
    }

    pub fn read_csv(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty report"))?;
        if header?.trim() != "method,threshold,arl,arl_se,edd,edd_se,censored_frac" {
            return Err(Error::parse(1, "unexpected report header"));
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let fields: Vec<&str> = text.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::parse(lineno, "expected 7 fields"));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("bad number {s:?}")))
            };
            rows.push(MetricRow {
                method: fields[0].to_string(),
                threshold: num(fields[1])?,
                arl: num(fields[2])?,
                arl_se: num(fields[3])?,
                edd: num(fields[4])?,
                edd_se: num(fields[5])?,
                censored_frac: num(fields[6])?,
            });
        }
        Ok(MetricReport { rows })
    }

    pub fn row(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Runs the full protocol: per method and ARL target, calibrate the
/// threshold on null traces, then estimate EDD on cascade streams at that
/// threshold.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricReport> {
    let (graph, alpha) = spec.build_graph()?;
    spec.validate(&graph, &alpha)?;
    let mut rows = Vec::new();
    for method in &spec.methods {
        let label = method.label();
        let traces = collect_null_traces(method, spec, &graph, &alpha)?;
        let warmup = method.build(&graph, &alpha)?.warmup();
        for &target in std::iter::once(&spec.target_arl).chain(&spec.frontier_targets) {
            let cal = calibrate_threshold(&traces, spec.run_cap, warmup, target, spec.arl_tol)?;
            let edd = estimate_edd(method, spec, &graph, &alpha, cal.threshold)?;
            let pooled = (cal.arl.censored + edd.censored) as f64
                / (cal.arl.trials + edd.trials) as f64;
            rows.push(MetricRow {
                method: label.clone(),
                threshold: cal.threshold,
                arl: cal.arl.mean,
                arl_se: cal.arl.se,
                edd: edd.mean,
                edd_se: edd.se,
                censored_frac: pooled,
            });
        }
    }
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_node_spec(trials: usize, target: f64) -> ExperimentSpec {
        ExperimentSpec {
            name: "unit".to_string(),
            graph: GraphSource::Complete { n: 2 },
            alpha0: Some(0.1),
            post_mean: 1.0,
            post_std: 1.0,
            null_model: NullModel::PureNoise,
            seed_tick: 50,
            seed_node: Some(1),
            trials,
            run_cap: 4000,
            edd_cap: 600,
            target_arl: target,
            arl_tol: 0.1,
            frontier_targets: Vec::new(),
            seed: 99,
            methods: vec![MethodSpec::Cusum { mu1: 1.0 }],
        }
    }

    #[test]
    fn running_stats_merge_is_order_independent() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0, 3.0];
        let mut all = RunningStats::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = RunningStats::default();
        let mut b = RunningStats::default();
        xs[..2].iter().for_each(|&x| a.push(x));
        xs[2..].iter().for_each(|&x| b.push(x));
        let ab = a.merge(b);
        let ba = b.merge(a);
        for merged in [ab, ba] {
            assert!((merged.mean() - all.mean()).abs() < 1e-12);
            assert!((merged.se() - all.se()).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_crossing_matches_linear_scan() {
        let trace = StatTrace {
            records: vec![(3, 0.5), (7, 1.25), (20, 4.0)],
            last_tick: 50,
        };
        let linear = |b: f64| trace.records.iter().find(|&&(_, v)| v > b).map(|&(t, _)| t);
        for &b in &[-1.0, 0.0, 0.5, 1.0, 1.25, 3.9, 4.0, 9.0, f64::NEG_INFINITY] {
            assert_eq!(trace.first_crossing(b), linear(b), "b={b}");
        }
        assert_eq!(trace.first_crossing(f64::INFINITY), None);
    }

    #[test]
    fn trial_seeds_are_stable_and_distinct() {
        let a = trial_seed(1, PHASE_NULL, 0);
        let b = trial_seed(1, PHASE_NULL, 1);
        let c = trial_seed(1, PHASE_CHANGE, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, trial_seed(1, PHASE_NULL, 0));
    }

    #[test]
    fn arl_hits_the_trivial_brackets() {
        let spec = single_node_spec(40, 200.0);
        let (graph, alpha) = spec.build_graph().unwrap();
        let method = &spec.methods[0];
        let mut det = method.build(&graph, &alpha).unwrap();
        // threshold -inf: alarm at the first statistic, warmup + 1 = 1
        let low = estimate_arl(det.as_mut(), &spec, &graph, f64::NEG_INFINITY).unwrap();
        assert_eq!(low.mean, 1.0);
        assert_eq!(low.censored, 0);
        // threshold +inf: everything censors at the cap
        let high = estimate_arl(det.as_mut(), &spec, &graph, f64::INFINITY).unwrap();
        assert_eq!(high.mean, spec.run_cap as f64);
        assert_eq!(high.censored, spec.trials);
        assert_eq!(high.censored_frac(), 1.0);
    }

    #[test]
    fn proposed_detector_warms_up_a_full_window() {
        let g = Graph::complete(3);
        let a = InfluenceMatrix::uniform(&g, 0.1).unwrap();
        let cfg = DetectorConfig {
            window_len: 6,
            max_path: 2,
            expand_count: 1,
            thin_q: 0.5,
            l1_floor: 0.01,
            eta: 1,
            b: f64::INFINITY,
            sigma_floor: 0.1,
        };
        let mut det = ProposedDetector::new(g, a, cfg).unwrap();
        assert_eq!(det.warmup(), 5);
        det.reset(1);
        for t in 0..10 {
            let out = det.step(&[0.1, -0.2, 0.3]);
            assert_eq!(out.is_some(), t >= 5);
        }
    }

    #[test]
    fn arl_is_monotone_in_threshold_under_crn() {
        let spec = single_node_spec(60, 200.0);
        let (graph, alpha) = spec.build_graph().unwrap();
        let traces = collect_null_traces(&spec.methods[0], &spec, &graph, &alpha).unwrap();
        let mut last = 0.0;
        for &b in &[0.5, 1.0, 2.0, 4.0, 8.0] {
            let est = arl_at_threshold(&traces, b, spec.run_cap);
            assert!(est.mean >= last, "ARL dropped at b={b}");
            last = est.mean;
        }
    }

    #[test]
    fn calibration_hits_target_and_holds_out() {
        let spec = single_node_spec(1500, 300.0);
        let (graph, alpha) = spec.build_graph().unwrap();
        let method = &spec.methods[0];
        let traces = collect_null_traces(method, &spec, &graph, &alpha).unwrap();
        let cal = calibrate_threshold(&traces, spec.run_cap, 0, spec.target_arl, 0.1).unwrap();
        assert!((cal.arl.mean - 300.0).abs() <= 30.0);
        // fresh-seed holdout stays within 10%
        let mut holdout = spec.clone();
        holdout.seed = 1234;
        let mut det = method.build(&graph, &alpha).unwrap();
        let fresh = estimate_arl(det.as_mut(), &holdout, &graph, cal.threshold).unwrap();
        assert!(
            (fresh.mean - 300.0).abs() <= 30.0,
            "holdout ARL {} for threshold {}",
            fresh.mean,
            cal.threshold
        );
    }

    #[test]
    fn calibration_below_first_tick_returns_low_bracket() {
        let spec = single_node_spec(50, 200.0);
        let (graph, alpha) = spec.build_graph().unwrap();
        let traces = collect_null_traces(&spec.methods[0], &spec, &graph, &alpha).unwrap();
        let cal = calibrate_threshold(&traces, spec.run_cap, 0, 1.0, 0.5).unwrap();
        assert_eq!(cal.threshold, f64::NEG_INFINITY);
        assert_eq!(cal.arl.mean, 1.0);
    }

    #[test]
    fn edd_is_zero_when_alarming_before_the_seed() {
        let spec = single_node_spec(30, 200.0);
        let (graph, alpha) = spec.build_graph().unwrap();
        let est = estimate_edd(&spec.methods[0], &spec, &graph, &alpha, f64::NEG_INFINITY).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.censored, 0);
    }

    #[test]
    fn cusum_arl_self_consistent_across_seeds() {
        // two independent 10^4-trial estimates of the same ARL agree
        // within 15%
        let mut spec = single_node_spec(10_000, 50.0);
        spec.run_cap = 2000;
        let (graph, alpha) = spec.build_graph().unwrap();
        let method = &spec.methods[0];
        let mut det = method.build(&graph, &alpha).unwrap();
        let a = estimate_arl(det.as_mut(), &spec, &graph, 4.0).unwrap();
        spec.seed = 31337;
        let b = estimate_arl(det.as_mut(), &spec, &graph, 4.0).unwrap();
        let rel = (a.mean - b.mean).abs() / a.mean;
        assert!(rel < 0.15, "ARL {} vs {} differ by {rel}", a.mean, b.mean);
    }

    #[test]
    fn report_csv_round_trips_exactly() {
        let report = MetricReport {
            rows: vec![
                MetricRow {
                    method: "proposed".to_string(),
                    threshold: 7.25,
                    arl: 1012.5,
                    arl_se: 70.03125,
                    edd: 33.125,
                    edd_se: 1.5,
                    censored_frac: 0.005,
                },
                MetricRow {
                    method: "cusum_mu1".to_string(),
                    threshold: f64::INFINITY,
                    arl: 4000.0,
                    arl_se: 0.0,
                    edd: 500.0,
                    edd_se: 12.0625,
                    censored_frac: 1.0,
                },
            ],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let back = MetricReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn experiment_spec_json_round_trips() {
        let spec = single_node_spec(10, 100.0);
        let text = spec.to_json().unwrap();
        let back = ExperimentSpec::from_json(&text).unwrap();
        assert_eq!(back.name, spec.name);
        assert_eq!(back.trials, spec.trials);
        assert_eq!(back.methods.len(), 1);
        assert!(ExperimentSpec::from_json("{\"name\": 3}").is_err());
    }

    #[test]
    fn spec_validation_catches_protocol_errors() {
        let spec = single_node_spec(10, 100.0);
        let (graph, alpha) = spec.build_graph().unwrap();
        assert!(spec.validate(&graph, &alpha).is_ok());
        let mut bad = spec.clone();
        bad.trials = 0;
        assert!(bad.validate(&graph, &alpha).is_err());
        let mut bad = spec.clone();
        bad.target_arl = 1e9;
        assert!(bad.validate(&graph, &alpha).is_err());
        let mut bad = spec.clone();
        bad.edd_cap = 10;
        assert!(bad.validate(&graph, &alpha).is_err());
        let mut bad = spec.clone();
        bad.seed_node = Some(5);
        assert!(bad.validate(&graph, &alpha).is_err());
        let mut bad = spec;
        bad.null_model = NullModel::Contaminated { count: 2 };
        assert!(bad.validate(&graph, &alpha).is_err());
    }

    #[test]
    fn smoke_experiment_produces_sane_rows() {
        let spec = ExperimentSpec {
            name: "smoke".to_string(),
            graph: GraphSource::Complete { n: 4 },
            alpha0: Some(0.1),
            post_mean: 1.0,
            post_std: 1.0,
            null_model: NullModel::PureNoise,
            seed_tick: 20,
            seed_node: None,
            trials: 30,
            run_cap: 500,
            edd_cap: 220,
            target_arl: 120.0,
            arl_tol: 0.25,
            frontier_targets: Vec::new(),
            seed: 5,
            methods: vec![
                MethodSpec::Proposed {
                    config: DetectorConfig {
                        window_len: 20,
                        max_path: 2,
                        expand_count: 1,
                        thin_q: 0.5,
                        l1_floor: (-5.0f64).exp(),
                        eta: 1,
                        b: f64::INFINITY,
                        sigma_floor: 0.1,
                    },
                },
                MethodSpec::Cusum { mu1: 1.0 },
            ],
        };
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(row.arl > 0.0 && row.arl.is_finite());
            assert!(row.edd >= 0.0);
            assert!(row.arl_se >= 0.0 && row.edd_se >= 0.0);
            assert!((0.0..=1.0).contains(&row.censored_frac));
        }
        assert!(report.row("proposed").is_some());
        assert!(report.row("cusum_mu1").is_some());
    }
}
