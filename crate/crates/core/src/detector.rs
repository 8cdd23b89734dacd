//! Sliding-window GLR statistic for cascading change-points, computed by a
//! pruned depth-first path search, plus the streaming stopping rule.
//!
//! The statistic at tick `T` is the difference between the best joint
//! log-likelihood over hypotheses with at least `eta` changes and the best
//! over hypotheses with at most `eta - 1` changes, both searched over the
//! last `L` ticks. An alarm is raised the first time the statistic exceeds
//! the threshold `b`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    measurement_loglik_node, CandidateTau, WindowView, DEFAULT_SIGMA_FLOOR,
};
use crate::topology::{Graph, InfluenceMatrix};

/// Search and stopping-rule parameters.
///
/// Serialized keys match the canonical parameter names: `L`, `m`, `P`, `q`,
/// `l1`, `eta`, `b`, `sigma_floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Window length in ticks.
    #[serde(rename = "L")]
    pub window_len: usize,
    /// Maximum hypothesis path length.
    #[serde(rename = "m")]
    pub max_path: usize,
    /// Nodes sampled per expansion step.
    #[serde(rename = "P")]
    pub expand_count: usize,
    /// Thinning percentile in [0, 1); a node keeps its top
    /// `ceil(L * (1 - q))` ticks.
    #[serde(rename = "q")]
    pub thin_q: f64,
    /// Floor on a hypothesis path's failure density, in [0, 1]; extensions
    /// below it are pruned and 0 disables the test.
    #[serde(rename = "l1")]
    pub l1_floor: f64,
    /// Required change count for the alternative hypothesis.
    pub eta: usize,
    /// Alarm threshold.
    pub b: f64,
    /// Lower bound on the post-change std estimate.
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
}

fn default_sigma_floor() -> f64 {
    DEFAULT_SIGMA_FLOOR
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window_len: 100,
            max_path: 5,
            expand_count: 1,
            thin_q: 0.8,
            l1_floor: (-5.0f64).exp(),
            eta: 1,
            b: f64::INFINITY,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

impl DetectorConfig {
    /// Checks internal consistency and fit against a graph of `n` nodes.
    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.window_len < 2 {
            return fail(format!("L must be at least 2, got {}", self.window_len));
        }
        if !(1 <= self.eta && self.eta <= self.max_path && self.max_path <= n) {
            return fail(format!(
                "need 1 <= eta <= m <= n, got eta={}, m={}, n={n}",
                self.eta, self.max_path
            ));
        }
        if self.expand_count < 1 {
            return fail("P must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.thin_q) {
            return fail(format!("q must lie in [0, 1), got {}", self.thin_q));
        }
        if !(0.0..=1.0).contains(&self.l1_floor) {
            return fail(format!("l1 must lie in [0, 1], got {}", self.l1_floor));
        }
        if !(self.sigma_floor.is_finite() && self.sigma_floor > 0.0) {
            return fail(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if self.b.is_nan() {
            return fail("threshold b must not be NaN".into());
        }
        Ok(())
    }

    /// Parses either JSON or `key=value` lines (keys `L`, `m`, `P`, `q`,
    /// `l1`, `eta`, `b`, `sigma_floor`; `#` comments allowed).
    pub fn from_config_text(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return Ok(serde_json::from_str(text)?);
        }
        let mut cfg = DetectorConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::parse(idx + 1, format!("bad {what}: {value:?}"));
            match key {
                "L" => cfg.window_len = value.parse().map_err(|_| bad("L"))?,
                "m" => cfg.max_path = value.parse().map_err(|_| bad("m"))?,
                "P" => cfg.expand_count = value.parse().map_err(|_| bad("P"))?,
                "q" => cfg.thin_q = value.parse().map_err(|_| bad("q"))?,
                "l1" => cfg.l1_floor = value.parse().map_err(|_| bad("l1"))?,
                "eta" => cfg.eta = value.parse().map_err(|_| bad("eta"))?,
                "b" => cfg.b = value.parse().map_err(|_| bad("b"))?,
                "sigma_floor" => cfg.sigma_floor = value.parse().map_err(|_| bad("sigma_floor"))?,
                other => return Err(Error::parse(idx + 1, format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    /// Canonical `key=value` rendering, one parameter per line.
    pub fn to_key_value_string(&self) -> String {
        format!(
            "L={}\nm={}\nP={}\nq={}\nl1={}\neta={}\nb={}\nsigma_floor={}\n",
            self.window_len,
            self.max_path,
            self.expand_count,
            self.thin_q,
            self.l1_floor,
            self.eta,
            self.b,
            self.sigma_floor
        )
    }
}

/// Ordered change-point hypothesis: nodes sorted by change time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathHypothesis {
    /// Distinct nodes in failure order.
    pub nodes: Vec<usize>,
    /// Matching change times (absolute ticks), strictly increasing along
    /// the chain.
    pub times: Vec<f64>,
    /// Joint log-likelihood of this hypothesis over the window.
    pub loglik: f64,
}

impl PathHypothesis {
    pub fn empty() -> Self {
        PathHypothesis { nodes: Vec::new(), times: Vec::new(), loglik: f64::NEG_INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Outcome of one hypothesis-side search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_loglik: f64,
    pub best_path: PathHypothesis,
    /// Per-node change times of the best hypothesis; exactly
    /// `best_path.len()` finite entries.
    pub best_tau: CandidateTau,
}

impl SearchResult {
    fn from_best(n: usize, loglik: f64, nodes: Vec<usize>, times: Vec<f64>) -> Self {
        let mut tau = CandidateTau::all_infinite(n);
        for (&x, &t) in nodes.iter().zip(&times) {
            tau.set(x, t);
        }
        SearchResult {
            best_loglik: loglik,
            best_path: PathHypothesis { nodes, times, loglik },
            best_tau: tau,
        }
    }

    fn impossible(n: usize) -> Self {
        SearchResult {
            best_loglik: f64::NEG_INFINITY,
            best_path: PathHypothesis::empty(),
            best_tau: CandidateTau::all_infinite(n),
        }
    }
}

/// Which side of the hypothesis test a search optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypothesisSide {
    /// At least `eta` changes.
    Alternative,
    /// At most `eta - 1` changes (the all-infinite hypothesis included).
    Null,
}

/// Per-window precomputation: measurement gains for every `(node, tick)`
/// candidate and the per-node thinned tick sets.
#[derive(Debug, Clone)]
pub struct WindowStats {
    len: usize,
    origin: u64,
    null_total: f64,
    /// `gain[i * len + k]`: measurement log-likelihood advantage of a change
    /// on node `i` at window position `k` over no change; always >= 0.
    gain: Vec<f64>,
    /// Per node, ascending window positions that survive the percentile
    /// rule; at most `ceil(len * (1 - q))` entries.
    thinned: Vec<Vec<usize>>,
}

impl WindowStats {
    /// Computes gains and thinned tick sets for one window.
    ///
    /// A node keeps the ticks with the `ceil(L * (1 - q))` largest gains;
    /// ties at the cut are broken toward earlier ticks so the bound is
    /// exact.
    pub fn compute(window: &WindowView, sigma_floor: f64, thin_q: f64) -> Self {
        assert!((0.0..1.0).contains(&thin_q), "q out of range");
        let n = window.node_count();
        let len = window.len();
        let keep = ((len as f64) * (1.0 - thin_q)).ceil() as usize;
        let keep = keep.clamp(1, len);
        let mut gain = vec![0.0; n * len];
        let mut thinned = Vec::with_capacity(n);
        let mut null_total = 0.0;
        let mut order: Vec<usize> = Vec::with_capacity(len);
        for i in 0..n {
            let row = window.row(i);
            // suffix scan: s1 = sum of row[k..], s2 = sum of squares
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            let g = &mut gain[i * len..(i + 1) * len];
            for k in (0..len).rev() {
                s1 += row[k];
                s2 += row[k] * row[k];
                let n_post = (len - k) as f64;
                let mean = s1 / n_post;
                let var = (s2 / n_post - mean * mean).max(0.0);
                let sd = var.sqrt().max(sigma_floor);
                g[k] = 0.5 * s2 - n_post * var / (2.0 * sd * sd) - n_post * sd.ln();
            }
            null_total += -0.5 * s2 - 0.5 * (len as f64) * LN_2PI;
            order.clear();
            order.extend(0..len);
            order.sort_unstable_by(|&a, &b| {
                g[b].partial_cmp(&g[a]).unwrap().then(a.cmp(&b))
            });
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            thinned.push(kept);
        }
        WindowStats { len, origin: window.origin(), null_total, gain, thinned }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn origin(&self) -> u64 {
        self.origin
    }

    /// Joint log-likelihood of the all-infinite hypothesis.
    pub fn null_total(&self) -> f64 {
        self.null_total
    }

    pub fn gain(&self, node: usize, k: usize) -> f64 {
        self.gain[node * self.len + k]
    }

    pub fn thinned_ticks(&self, node: usize) -> &[usize] {
        &self.thinned[node]
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Candidate tick sets for extending a partial hypothesis.
///
/// For each node `x` not on the path, returns the absolute ticks that pass
/// the per-node percentile rule and, beyond depth 1, occur strictly after
/// the parent time and keep the appended path failure density at or above
/// `l1`. Nodes on the path get empty sets.
pub fn thinning(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    path_nodes: &[usize],
    path_times: &[f64],
    config: &DetectorConfig,
    window: &WindowView,
) -> Vec<Vec<u64>> {
    let stats = WindowStats::compute(window, config.sigma_floor, config.thin_q);
    let state = PathState::replay(graph, alpha, config, &stats, path_nodes, path_times);
    let n = graph.node_count();
    let mut out = vec![Vec::new(); n];
    for (x, slot) in out.iter_mut().enumerate() {
        if state.failed[x] {
            continue;
        }
        let feas = state.feasible_ticks(x);
        *slot = feas.into_iter().map(|k| stats.origin + k as u64).collect();
    }
    out
}

/// Samples up to `P` distinct next-failure candidates.
///
/// The risk set is every unfailed node adjacent to a failed one through a
/// positive rate; draws are weighted by total incoming rate from the failed
/// set, sequentially without replacement. When `P` covers the whole risk
/// set it is returned in ascending order without consuming randomness.
pub fn sample_risk_set(
    failed: &[bool],
    alpha: &InfluenceMatrix,
    p: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut nodes: Vec<usize> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for x in 0..failed.len() {
        if failed[x] {
            continue;
        }
        let w: f64 = alpha
            .incoming(x)
            .iter()
            .filter(|&&(j, _)| failed[j])
            .map(|&(_, a)| a)
            .sum();
        if w > 0.0 {
            nodes.push(x);
            weights.push(w);
        }
    }
    if p >= nodes.len() {
        return nodes;
    }
    let mut picked = Vec::with_capacity(p);
    let mut total: f64 = weights.iter().sum();
    for _ in 0..p {
        let mut v = rng.gen::<f64>() * total;
        let mut choice = None;
        for (slot, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                choice = Some(slot);
                v -= w;
                if v <= 0.0 {
                    break;
                }
            }
        }
        let slot = choice.expect("positive total weight");
        picked.push(nodes[slot]);
        total -= weights[slot];
        weights[slot] = 0.0;
    }
    picked
}

/// Incremental search state over one window.
///
/// Two propagation quantities are maintained by closed-form deltas. The
/// full log-likelihood (used in hypothesis evaluation): appending node x at
/// time t to failed set F adds `log(Lam) + (Lam - A)(T - t)` where `Lam`
/// sums rates from F into x and `A` sums rates from x into nodes outside F;
/// the first append has no density factor and adds `-A (T - t)`. The path
/// density (used for the l1 floor) drops the survivor terms: the append
/// adds `log(Lam) - sum_j a_jx (t - tau_j)` over failed influencers j,
/// which is decreasing in t, so a tick scan can stop at the first
/// violation.
struct PathState<'a> {
    graph: &'a Graph,
    alpha: &'a InfluenceMatrix,
    config: &'a DetectorConfig,
    stats: &'a WindowStats,
    /// ln(l1); negative infinity disables the floor.
    ln_l1: f64,
    failed: Vec<bool>,
    /// Change time per node; infinite off the path.
    time_of: Vec<f64>,
    nodes: Vec<usize>,
    times: Vec<f64>,
    prop_ll: f64,
    path_ll: f64,
    gain_sum: f64,
}

struct Frame {
    prev_prop: f64,
    prev_path: f64,
    prev_gain: f64,
}

impl<'a> PathState<'a> {
    fn new(
        graph: &'a Graph,
        alpha: &'a InfluenceMatrix,
        config: &'a DetectorConfig,
        stats: &'a WindowStats,
    ) -> Self {
        let ln_l1 = if config.l1_floor == 0.0 {
            f64::NEG_INFINITY
        } else {
            config.l1_floor.ln()
        };
        PathState {
            graph,
            alpha,
            config,
            stats,
            ln_l1,
            failed: vec![false; graph.node_count()],
            time_of: vec![f64::INFINITY; graph.node_count()],
            nodes: Vec::new(),
            times: Vec::new(),
            prop_ll: 0.0,
            path_ll: 0.0,
            gain_sum: 0.0,
        }
    }

    /// Rebuilds the state for an existing partial path.
    fn replay(
        graph: &'a Graph,
        alpha: &'a InfluenceMatrix,
        config: &'a DetectorConfig,
        stats: &'a WindowStats,
        path_nodes: &[usize],
        path_times: &[f64],
    ) -> Self {
        assert_eq!(path_nodes.len(), path_times.len(), "path nodes/times mismatch");
        assert!(path_nodes.len() <= config.max_path, "partial path longer than m");
        let mut state = PathState::new(graph, alpha, config, stats);
        for (&x, &t) in path_nodes.iter().zip(path_times) {
            if let Some(&last) = state.times.last() {
                assert!(t > last, "path times must strictly increase");
            }
            assert!(!state.failed[x], "node {x} repeated on the path");
            let k = position_in(stats, t);
            let _ = state.push(x, k, t);
        }
        state
    }

    fn end_tick(&self) -> f64 {
        (self.stats.origin + self.stats.len as u64 - 1) as f64
    }

    /// Incoming rate into `x` from the failed set.
    fn lambda_in(&self, x: usize) -> f64 {
        self.alpha
            .incoming(x)
            .iter()
            .filter(|&&(j, _)| self.failed[j])
            .map(|&(_, a)| a)
            .sum()
    }

    /// Outgoing rate from `x` into nodes outside the failed set.
    fn out_to_unfailed(&self, x: usize) -> f64 {
        self.alpha
            .outgoing(x)
            .iter()
            .filter(|&&(i, _)| !self.failed[i])
            .map(|&(_, a)| a)
            .sum()
    }

    /// Propagation delta for appending `x` at time `t`; negative infinity
    /// when `x` has no failed influencer yet.
    fn prop_delta(&self, x: usize, t: f64) -> f64 {
        let a_out = self.out_to_unfailed(x);
        if self.nodes.is_empty() {
            return -a_out * (self.end_tick() - t);
        }
        let lam = self.lambda_in(x);
        if lam <= 0.0 {
            return f64::NEG_INFINITY;
        }
        lam.ln() + (lam - a_out) * (self.end_tick() - t)
    }

    /// Path-density delta for appending `x` at time `t`: hazard at the
    /// failure and survival against the already-failed influencers only.
    fn path_delta(&self, x: usize, t: f64) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let lam = self.lambda_in(x);
        if lam <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let exposure: f64 = self
            .alpha
            .incoming(x)
            .iter()
            .filter(|&&(j, _)| self.failed[j])
            .map(|&(j, a)| a * (t - self.time_of[j]))
            .sum();
        lam.ln() - exposure
    }

    fn push(&mut self, x: usize, k: usize, t: f64) -> Frame {
        let frame = Frame {
            prev_prop: self.prop_ll,
            prev_path: self.path_ll,
            prev_gain: self.gain_sum,
        };
        self.prop_ll += self.prop_delta(x, t);
        self.path_ll += self.path_delta(x, t);
        self.gain_sum += self.stats.gain(x, k);
        self.failed[x] = true;
        self.time_of[x] = t;
        self.nodes.push(x);
        self.times.push(t);
        frame
    }

    fn pop(&mut self, frame: Frame) {
        let x = self.nodes.pop().expect("pop from empty path");
        self.times.pop();
        self.failed[x] = false;
        self.time_of[x] = f64::INFINITY;
        self.prop_ll = frame.prev_prop;
        self.path_ll = frame.prev_path;
        self.gain_sum = frame.prev_gain;
    }

    fn current_loglik(&self) -> f64 {
        self.stats.null_total() + self.gain_sum + self.prop_ll
    }

    /// Window positions at which `x` may be appended: percentile survivors,
    /// strictly after the parent time, propagation floor respected (the
    /// floor is inert at depth 1).
    fn feasible_ticks(&self, x: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_feasible_tick(x, |k| out.push(k));
        out
    }

    fn for_each_feasible_tick(&self, x: usize, mut visit: impl FnMut(usize)) {
        let origin = self.stats.origin() as f64;
        let parent_time = self.times.last().copied();
        if self.nodes.is_empty() {
            for &k in self.stats.thinned_ticks(x) {
                visit(k);
            }
            return;
        }
        let lam = self.lambda_in(x);
        if lam <= 0.0 {
            return;
        }
        // path density ln(lam) - sum_j a_jx (t - tau_j), affine in t
        let anchor: f64 = self
            .alpha
            .incoming(x)
            .iter()
            .filter(|&&(j, _)| self.failed[j])
            .map(|&(j, a)| a * self.time_of[j])
            .sum();
        let base = self.path_ll + lam.ln() + anchor;
        for &k in self.stats.thinned_ticks(x) {
            let t = origin + k as f64;
            if let Some(pt) = parent_time {
                if t <= pt {
                    continue;
                }
            }
            if base - lam * t >= self.ln_l1 {
                visit(k);
            } else {
                // decreasing in t: every later tick fails too
                return;
            }
        }
    }
}

fn position_in(stats: &WindowStats, t: f64) -> usize {
    let first_tick = t.ceil();
    let origin = stats.origin() as f64;
    let end = (stats.origin() + stats.len() as u64 - 1) as f64;
    assert!(
        first_tick >= origin && first_tick <= end,
        "time {t} registers outside the window"
    );
    (first_tick - origin) as usize
}

struct Best {
    loglik: f64,
    nodes: Vec<usize>,
    times: Vec<f64>,
}

/// Depth-first expansion: evaluates every visited hypothesis whose length
/// reaches `min_len`, then extends up to `max_len` via risk-set sampling.
fn extend(
    state: &mut PathState<'_>,
    min_len: usize,
    max_len: usize,
    best: &mut Best,
    rng: &mut impl Rng,
) {
    if state.nodes.len() >= min_len {
        let ll = state.current_loglik();
        if ll > best.loglik {
            best.loglik = ll;
            best.nodes = state.nodes.clone();
            best.times = state.times.clone();
        }
    }
    if state.nodes.len() >= max_len {
        return;
    }
    if state.nodes.is_empty() {
        // first change: every node, free over its thinned ticks
        for x in 0..state.graph.node_count() {
            let ticks = state.feasible_ticks(x);
            for k in ticks {
                let t = state.stats.origin() as f64 + k as f64;
                let frame = state.push(x, k, t);
                extend(state, min_len, max_len, best, rng);
                state.pop(frame);
            }
        }
        return;
    }
    let sampled = sample_risk_set(&state.failed, state.alpha, state.config.expand_count, rng);
    for x in sampled {
        let ticks = state.feasible_ticks(x);
        for k in ticks {
            let t = state.stats.origin() as f64 + k as f64;
            let frame = state.push(x, k, t);
            extend(state, min_len, max_len, best, rng);
            state.pop(frame);
        }
    }
}

/// Best completion of a partial hypothesis, per Algorithm 2.
///
/// Extends `path_nodes`/`path_times` (which may be empty) up to length `m`,
/// evaluating every visited hypothesis with at least `eta` changes,
/// including the partial itself.
pub fn gen_next(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    config: &DetectorConfig,
    path_nodes: &[usize],
    path_times: &[f64],
    window: &WindowView,
    rng: &mut impl Rng,
) -> SearchResult {
    let stats = WindowStats::compute(window, config.sigma_floor, config.thin_q);
    let mut state = PathState::replay(graph, alpha, config, &stats, path_nodes, path_times);
    let mut best = Best { loglik: f64::NEG_INFINITY, nodes: Vec::new(), times: Vec::new() };
    extend(&mut state, config.eta, config.max_path, &mut best, rng);
    if best.loglik == f64::NEG_INFINITY {
        SearchResult::impossible(graph.node_count())
    } else {
        SearchResult::from_best(graph.node_count(), best.loglik, best.nodes, best.times)
    }
}

/// Maximizes the joint log-likelihood over one hypothesis side.
///
/// The alternative side searches paths of length `eta..=m` from every
/// first-change node. The null side caps paths at `eta - 1` changes and
/// always admits the all-infinite hypothesis; for `eta = 1` that closed
/// form is the entire null side.
pub fn search_max_loglik(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    config: &DetectorConfig,
    window: &WindowView,
    side: HypothesisSide,
    rng: &mut impl Rng,
) -> SearchResult {
    let stats = WindowStats::compute(window, config.sigma_floor, config.thin_q);
    search_with_stats(graph, alpha, config, &stats, side, rng)
}

fn search_with_stats(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    config: &DetectorConfig,
    stats: &WindowStats,
    side: HypothesisSide,
    rng: &mut impl Rng,
) -> SearchResult {
    let n = graph.node_count();
    let (min_len, max_len, mut best) = match side {
        HypothesisSide::Alternative => (
            config.eta,
            config.max_path,
            Best { loglik: f64::NEG_INFINITY, nodes: Vec::new(), times: Vec::new() },
        ),
        HypothesisSide::Null => (
            0,
            config.eta - 1,
            // the all-infinite hypothesis always competes on the null side
            Best { loglik: stats.null_total(), nodes: Vec::new(), times: Vec::new() },
        ),
    };
    if max_len > 0 {
        // nonempty paths; the empty hypothesis is covered by the seed above
        let mut state = PathState::new(graph, alpha, config, stats);
        extend(&mut state, min_len.max(1), max_len, &mut best, rng);
    }
    if best.loglik == f64::NEG_INFINITY {
        SearchResult::impossible(n)
    } else {
        SearchResult::from_best(n, best.loglik, best.nodes, best.times)
    }
}

/// GLR statistic: best alternative-side log-likelihood minus best null-side
/// log-likelihood. Negative infinity (never alarms) when no feasible
/// alternative exists.
pub fn glr_statistic(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    config: &DetectorConfig,
    window: &WindowView,
    rng: &mut impl Rng,
) -> f64 {
    glr_with_detail(graph, alpha, config, window, rng).0
}

fn glr_with_detail(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    config: &DetectorConfig,
    window: &WindowView,
    rng: &mut impl Rng,
) -> (f64, SearchResult) {
    let stats = WindowStats::compute(window, config.sigma_floor, config.thin_q);
    let alt = search_with_stats(graph, alpha, config, &stats, HypothesisSide::Alternative, rng);
    if alt.best_loglik == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, alt);
    }
    let null = search_with_stats(graph, alpha, config, &stats, HypothesisSide::Null, rng);
    (alt.best_loglik - null.best_loglik, alt)
}

/// Streaming detector: ring buffer of the last `L` ticks, statistic from
/// tick `L` onward, alarm on the first statistic strictly above `b`.
#[derive(Debug, Clone)]
pub struct CascadeDetector {
    graph: Graph,
    alpha: InfluenceMatrix,
    config: DetectorConfig,
    rng: ChaCha8Rng,
    /// Node-major ring: `ring[i * L + (tick - 1) % L]`.
    ring: Vec<f64>,
    ticks_seen: u64,
    last: Option<(f64, SearchResult)>,
}

impl CascadeDetector {
    pub fn new(graph: Graph, alpha: InfluenceMatrix, config: DetectorConfig) -> Result<Self> {
        config.validate(graph.node_count())?;
        if alpha.node_count() != graph.node_count() {
            return Err(Error::InvalidConfig("graph/alpha size mismatch".into()));
        }
        let ring = vec![0.0; graph.node_count() * config.window_len];
        Ok(CascadeDetector {
            graph,
            alpha,
            config,
            rng: ChaCha8Rng::seed_from_u64(0),
            ring,
            ticks_seen: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn ticks_seen(&self) -> u64 {
        self.ticks_seen
    }

    /// Clears the window and reseeds the search rng.
    pub fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.ring.iter_mut().for_each(|v| *v = 0.0);
        self.ticks_seen = 0;
        self.last = None;
    }

    /// Feeds one tick; returns the statistic once the window is full.
    ///
    /// Panics if the row width does not match the graph.
    pub fn step(&mut self, row: &[f64]) -> Option<f64> {
        let n = self.graph.node_count();
        let len = self.config.window_len;
        assert_eq!(row.len(), n, "tick width {} does not match n={n}", row.len());
        let slot = (self.ticks_seen as usize) % len;
        for (i, &v) in row.iter().enumerate() {
            self.ring[i * len + slot] = v;
        }
        self.ticks_seen += 1;
        if self.ticks_seen < len as u64 {
            return None;
        }
        let window = self.current_window();
        let (stat, alt) =
            glr_with_detail(&self.graph, &self.alpha, &self.config, &window, &mut self.rng);
        self.last = Some((stat, alt));
        Some(stat)
    }

    /// Alternative-side result of the most recent statistic evaluation.
    pub fn last_result(&self) -> Option<&SearchResult> {
        self.last.as_ref().map(|(_, r)| r)
    }

    fn current_window(&self) -> WindowView {
        let len = self.config.window_len;
        let n = self.graph.node_count();
        let origin = self.ticks_seen - len as u64 + 1;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let ring_row = &self.ring[i * len..(i + 1) * len];
            let mut row = Vec::with_capacity(len);
            let start = (origin - 1) as usize;
            for c in 0..len {
                row.push(ring_row[(start + c) % len]);
            }
            rows.push(row);
        }
        WindowView::from_rows(origin, rows).expect("ring window is well formed")
    }
}

/// Result of running the stopping rule over a stream.
#[derive(Debug, Clone)]
pub struct StoppingReport {
    /// First tick with statistic strictly above `b`; `None` when the stream
    /// ended first (censored).
    pub alarm_tick: Option<u64>,
    /// Last tick consumed.
    pub last_tick: u64,
    /// `(tick, statistic)` for every evaluated tick, in order.
    pub trace: Vec<(u64, f64)>,
    /// Alternative-side search result at the alarm tick.
    pub alarming: Option<SearchResult>,
}

/// Runs the detector over a stream of measurement ticks until the first
/// alarm or the end of the stream.
pub fn run_detector(
    stream: impl IntoIterator<Item = Vec<f64>>,
    graph: Graph,
    alpha: InfluenceMatrix,
    config: DetectorConfig,
    seed: u64,
) -> Result<StoppingReport> {
    let b = config.b;
    let mut det = CascadeDetector::new(graph, alpha, config)?;
    det.reset(seed);
    let mut trace = Vec::new();
    for row in stream {
        if let Some(stat) = det.step(&row) {
            trace.push((det.ticks_seen(), stat));
            if stat > b {
                return Ok(StoppingReport {
                    alarm_tick: Some(det.ticks_seen()),
                    last_tick: det.ticks_seen(),
                    trace,
                    alarming: det.last_result().cloned(),
                });
            }
        }
    }
    Ok(StoppingReport {
        alarm_tick: None,
        last_tick: det.ticks_seen(),
        trace,
        alarming: None,
    })
}

/// Writes a statistic trace as CSV `t,S_eta,alarm`, with the configuration
/// echoed in `#`-prefixed header comments.
pub fn write_trace_csv(
    report: &StoppingReport,
    config: &DetectorConfig,
    mut writer: impl Write,
) -> Result<()> {
    for line in config.to_key_value_string().lines() {
        writeln!(writer, "# {line}")?;
    }
    writeln!(writer, "t,S_eta,alarm")?;
    for &(t, s) in &report.trace {
        let alarm = report.alarm_tick == Some(t);
        writeln!(writer, "{t},{s},{}", alarm as u8)?;
    }
    Ok(())
}

/// Trace rows `(tick, statistic)` plus the alarm tick, if any fired.
pub type TraceRows = (Vec<(u64, f64)>, Option<u64>);

/// Reads back the trace CSV written by [`write_trace_csv`], ignoring the
/// comment header.
pub fn read_trace_csv(reader: impl BufRead) -> Result<TraceRows> {
    let mut rows = Vec::new();
    let mut alarm = None;
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if !saw_header {
            if text != "t,S_eta,alarm" {
                return Err(Error::parse(lineno, "expected header t,S_eta,alarm"));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(lineno, "expected t,S_eta,alarm"));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad tick {:?}", fields[0])))?;
        let s: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad statistic {:?}", fields[1])))?;
        match fields[2] {
            "0" => {}
            "1" => alarm = Some(t),
            other => return Err(Error::parse(lineno, format!("bad alarm flag {other:?}"))),
        }
        rows.push((t, s));
    }
    if !saw_header {
        return Err(Error::parse(1, "missing trace header"));
    }
    Ok((rows, alarm))
}

/// Reference statistic for `eta = 1`: direct max over `(node, tick)` of the
/// single-change joint log-likelihood minus the all-infinite value. Used to
/// cross-check the search; quadratic in the window size.
pub fn single_change_statistic(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    window: &WindowView,
    sigma_floor: f64,
) -> f64 {
    use crate::likelihood::total_loglik;
    let n = window.node_count();
    let null: f64 = (0..n)
        .map(|i| measurement_loglik_node(window.row(i), None, sigma_floor))
        .sum();
    let mut best = f64::NEG_INFINITY;
    for x in 0..n {
        for k in 0..window.len() {
            let mut tau = CandidateTau::all_infinite(n);
            tau.set(x, window.origin() as f64 + k as f64);
            let ll = total_loglik(graph, alpha, &tau, window, sigma_floor);
            if ll > best {
                best = ll;
            }
        }
    }
    best - null
}
