//! Log-likelihoods for the propagation model and the Gaussian measurement
//! model, evaluated over a sliding window.
//!
//! Conventions: measurements at integer ticks, failure times continuous on
//! the same axis, and a change hypothesized at time `tau` affects every tick
//! `t >= ceil(tau)`. Measurement terms keep their additive constants, so
//! values are comparable across hypotheses and match the closed forms
//! literally.

use crate::error::{Error, Result};
use crate::sim::MeasurementPanel;
use crate::topology::{Graph, InfluenceMatrix};

/// Lower bound applied to the post-change std estimate.
pub const DEFAULT_SIGMA_FLOOR: f64 = 0.1;

/// Function form of [`DEFAULT_SIGMA_FLOOR`] for serde defaults.
pub fn default_sigma_floor_value() -> f64 {
    DEFAULT_SIGMA_FLOOR
}

/// Fixed-length view of the last `len` ticks of a measurement stream,
/// node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    n: usize,
    len: usize,
    /// 1-based absolute tick number of the first window position.
    origin: u64,
    /// `data[i * len + c]` is node `i` at window position `c`.
    data: Vec<f64>,
}

impl WindowView {
    /// Window of panel tick indices `end_idx + 1 - len ..= end_idx`
    /// (0-based), so the window's last tick is panel tick `end_idx + 1`.
    pub fn from_panel(panel: &MeasurementPanel, end_idx: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidData("window length must be positive".into()));
        }
        if end_idx >= panel.ticks() || end_idx + 1 < len {
            return Err(Error::InvalidData(format!(
                "window of {len} ticks ending at index {end_idx} does not fit a panel of {}",
                panel.ticks()
            )));
        }
        let n = panel.node_count();
        let start = end_idx + 1 - len;
        let mut data = vec![0.0; n * len];
        for c in 0..len {
            let row = panel.tick_row(start + c);
            for i in 0..n {
                data[i * len + c] = row[i];
            }
        }
        Ok(WindowView { n, len, origin: (start + 1) as u64, data })
    }

    /// Builds a window directly from node rows; `origin` is the absolute
    /// tick number of the first position.
    pub fn from_rows(origin: u64, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidData("window needs at least one node".into()));
        }
        let len = rows[0].len();
        if len == 0 {
            return Err(Error::InvalidData("window length must be positive".into()));
        }
        if origin == 0 {
            return Err(Error::InvalidData("tick numbering starts at 1".into()));
        }
        let mut data = Vec::with_capacity(n * len);
        for row in &rows {
            if row.len() != len {
                return Err(Error::InvalidData("window rows must have equal length".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(WindowView { n, len, origin, data })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Absolute tick number of window position 0.
    pub fn origin(&self) -> u64 {
        self.origin
    }

    /// Absolute tick number of the last window position.
    pub fn end_tick(&self) -> u64 {
        self.origin + self.len as u64 - 1
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.data[node * self.len..(node + 1) * self.len]
    }

    /// Window position of a change at time `tau`: the first affected tick,
    /// `ceil(tau)`, must land inside the window.
    pub fn position_of(&self, tau: f64) -> Option<usize> {
        let first_tick = tau.ceil();
        if first_tick < self.origin as f64 || first_tick > self.end_tick() as f64 {
            return None;
        }
        Some(first_tick as usize - self.origin as usize)
    }
}

/// Hypothesized per-node change times over one window; infinity means no
/// change on that node.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTau(Vec<f64>);

impl CandidateTau {
    pub fn from_vec(times: Vec<f64>) -> Result<Self> {
        for (i, &t) in times.iter().enumerate() {
            if t.is_nan() || t < 0.0 {
                return Err(Error::InvalidData(format!(
                    "candidate time for node {} must be non-negative, got {t}",
                    i + 1
                )));
            }
        }
        Ok(CandidateTau(times))
    }

    pub fn all_infinite(n: usize) -> Self {
        CandidateTau(vec![f64::INFINITY; n])
    }

    pub fn set(&mut self, node: usize, tau: f64) {
        assert!(!tau.is_nan() && tau >= 0.0, "bad candidate time {tau}");
        self.0[node] = tau;
    }

    pub fn get(&self, node: usize) -> f64 {
        self.0[node]
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn finite_count(&self) -> usize {
        self.0.iter().filter(|t| t.is_finite()).count()
    }
}

/// Propagation log-likelihood of the failure pattern `times` observed up to
/// time `t_end`.
///
/// The earliest failure (every node tied at the minimum) carries no density
/// term. Each later failed node contributes the log of its hazard at its
/// failure time minus its integrated hazard; each node unfailed by `t_end`
/// contributes its survival term. Returns 0 when nothing fails, and negative
/// infinity when a non-first failure has no strictly earlier failed
/// neighbor with positive rate.
///
/// Panics if `t_end` is not finite or sizes mismatch.
pub fn propagation_loglik(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    times: &[f64],
    t_end: f64,
) -> f64 {
    assert!(t_end.is_finite(), "t_end must be finite");
    assert_eq!(times.len(), graph.node_count(), "times/graph size mismatch");
    debug_assert!(times.iter().all(|t| !t.is_nan()));
    let Some(t_first) = times
        .iter()
        .copied()
        .filter(|t| t.is_finite())
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
    else {
        return 0.0;
    };
    let mut total = 0.0;
    for i in 0..times.len() {
        let ti = times[i];
        if ti <= t_end {
            // failed by t_end; tied-at-minimum nodes carry no density term
            if ti > t_first {
                let lam: f64 = alpha
                    .incoming(i)
                    .iter()
                    .filter(|&&(j, _)| times[j] < ti)
                    .map(|&(_, a)| a)
                    .sum();
                if lam <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                total += lam.ln();
                for &(j, a) in alpha.incoming(i) {
                    total -= a * (ti - times[j]).max(0.0);
                }
            }
        } else {
            // survived to t_end: pays each failed neighbor's exposure
            for &(j, a) in alpha.incoming(i) {
                let exposure = (t_end - times[j]).max(0.0);
                if exposure > 0.0 {
                    total -= a * exposure;
                }
            }
        }
    }
    total
}

/// Post-change Gaussian fit for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeMle {
    pub mean: f64,
    pub std: f64,
    pub n_post: usize,
}

/// Maximum-likelihood post-change parameters for a change at window
/// position `change_idx` (0-based); `None` means no change.
///
/// The std is the divide-by-n maximum-likelihood estimate, raised to
/// `sigma_floor` when smaller; this floored value is exactly the constrained
/// maximizer over `std >= sigma_floor`. With no change the pre-change law
/// `(0, 1)` is returned with `n_post = 0`.
///
/// Panics when `change_idx` is out of range or `sigma_floor` is not
/// positive.
pub fn post_change_mle(row: &[f64], change_idx: Option<usize>, sigma_floor: f64) -> NodeMle {
    assert!(sigma_floor > 0.0 && sigma_floor.is_finite(), "bad sigma floor");
    let Some(k) = change_idx else {
        return NodeMle { mean: 0.0, std: 1.0, n_post: 0 };
    };
    assert!(k < row.len(), "change index {k} out of window of {}", row.len());
    let post = &row[k..];
    let n = post.len() as f64;
    let mean = post.iter().sum::<f64>() / n;
    let var = (post.iter().map(|x| x * x).sum::<f64>() / n - mean * mean).max(0.0);
    NodeMle { mean, std: var.sqrt().max(sigma_floor), n_post: post.len() }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Gaussian log-likelihood of one node's window row under a change at
/// window position `change_idx`, with post-change parameters replaced by
/// their floored maximum-likelihood estimates.
///
/// Depends only on the relative position, never on the absolute tick
/// numbers. Additive constants are kept.
pub fn measurement_loglik_node(row: &[f64], change_idx: Option<usize>, sigma_floor: f64) -> f64 {
    let len = row.len() as f64;
    let base = -0.5 * len * LN_2PI;
    match change_idx {
        None => base - 0.5 * row.iter().map(|x| x * x).sum::<f64>(),
        Some(k) => {
            let mle = post_change_mle(row, Some(k), sigma_floor);
            let pre: f64 = row[..k].iter().map(|x| x * x).sum();
            let post_dev: f64 = row[k..].iter().map(|x| (x - mle.mean).powi(2)).sum();
            base - 0.5 * pre
                - post_dev / (2.0 * mle.std * mle.std)
                - mle.n_post as f64 * mle.std.ln()
        }
    }
}

/// Joint log-likelihood of a candidate change pattern over one window:
/// propagation term at the window's end tick plus per-node measurement
/// terms.
///
/// Finite candidate times must register inside the window
/// (`origin <= ceil(tau) <= end`).
pub fn total_loglik(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    tau: &CandidateTau,
    window: &WindowView,
    sigma_floor: f64,
) -> f64 {
    assert_eq!(tau.len(), window.node_count(), "tau/window size mismatch");
    assert_eq!(graph.node_count(), window.node_count(), "graph/window size mismatch");
    let prop = propagation_loglik(graph, alpha, tau.times(), window.end_tick() as f64);
    if prop == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut total = prop;
    for i in 0..window.node_count() {
        let ti = tau.get(i);
        let idx = if ti.is_finite() {
            let pos = window.position_of(ti);
            assert!(pos.is_some(), "candidate time {ti} for node {i} misses the window");
            pos
        } else {
            None
        };
        total += measurement_loglik_node(window.row(i), idx, sigma_floor);
    }
    total
}
