//! Reference detectors: per-node CuSum, windowed per-node GLR, and the
//! multi-chart top-eta CuSum aggregate.

use std::io::Write;

use crate::error::Result;

/// One node's CuSum statistic; never negative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CusumState {
    pub w: f64,
}

/// CuSum recursion for pre-change N(0,1) against post-change N(mu1,1):
/// `w <- max(w + mu1 * x - mu1^2 / 2, 0)`.
pub fn cusum_step(state: CusumState, x: f64, mu1: f64) -> CusumState {
    CusumState { w: (state.w + mu1 * x - 0.5 * mu1 * mu1).max(0.0) }
}

/// Per-node CuSum bank sharing one post-change mean.
#[derive(Debug, Clone)]
pub struct CusumBank {
    states: Vec<CusumState>,
    mu1: f64,
}

impl CusumBank {
    pub fn new(n: usize, mu1: f64) -> Self {
        assert!(mu1.is_finite() && mu1 != 0.0, "mu1 must be finite and nonzero");
        CusumBank { states: vec![CusumState::default(); n], mu1 }
    }

    pub fn reset(&mut self) {
        self.states.iter_mut().for_each(|s| *s = CusumState::default());
    }

    pub fn step(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.states.len(), "row width mismatch");
        for (s, &x) in self.states.iter_mut().zip(row) {
            *s = cusum_step(*s, x, self.mu1);
        }
    }

    pub fn states(&self) -> &[CusumState] {
        &self.states
    }

    pub fn top_sum(&self, eta: usize) -> f64 {
        multichart_cusum(&self.states, eta)
    }
}

/// Sum of the `eta` largest per-node CuSum statistics.
///
/// Panics when `eta` is zero or exceeds the number of states.
pub fn multichart_cusum(states: &[CusumState], eta: usize) -> f64 {
    assert!(eta >= 1 && eta <= states.len(), "eta {eta} out of range for {} states", states.len());
    let mut values: Vec<f64> = states.iter().map(|s| s.w).collect();
    values.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    values[..eta].iter().sum()
}

/// Windowed per-node GLR: max over change positions of the node's
/// measurement log-likelihood advantage over no change.
pub fn window_glr_node(row: &[f64], sigma_floor: f64) -> f64 {
    window_glr_node_detail(row, sigma_floor).1
}

/// Like [`window_glr_node`] but also reports the maximizing window
/// position.
pub fn window_glr_node_detail(row: &[f64], sigma_floor: f64) -> (usize, f64) {
    assert!(!row.is_empty(), "empty window row");
    assert!(sigma_floor > 0.0 && sigma_floor.is_finite(), "bad sigma floor");
    let len = row.len();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in (0..len).rev() {
        s1 += row[k];
        s2 += row[k] * row[k];
        let n_post = (len - k) as f64;
        let mean = s1 / n_post;
        let var = (s2 / n_post - mean * mean).max(0.0);
        let sd = var.sqrt().max(sigma_floor);
        let gain = 0.5 * s2 - n_post * var / (2.0 * sd * sd) - n_post * sd.ln();
        // scanning right to left, the earliest maximizing tick wins ties
        if gain >= best.1 {
            best = (k, gain);
        }
    }
    best
}

/// Stopping outcome of a baseline detector over one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    /// First tick with statistic strictly above the threshold; `None` when
    /// the stream ended first.
    pub alarm_tick: Option<u64>,
    pub last_tick: u64,
    /// `(tick, statistic)` for every tick evaluated.
    pub trace: Vec<(u64, f64)>,
}

/// Runs the multi-chart CuSum stopping rule over a stream of ticks.
pub fn run_multichart(
    stream: impl IntoIterator<Item = Vec<f64>>,
    n: usize,
    mu1: f64,
    eta: usize,
    b: f64,
) -> BaselineReport {
    let mut bank = CusumBank::new(n, mu1);
    let mut trace = Vec::new();
    let mut tick = 0u64;
    for row in stream {
        tick += 1;
        bank.step(&row);
        let s = bank.top_sum(eta);
        trace.push((tick, s));
        if s > b {
            return BaselineReport { alarm_tick: Some(tick), last_tick: tick, trace };
        }
    }
    BaselineReport { alarm_tick: None, last_tick: tick, trace }
}

/// Writes a baseline trace in the same CSV schema as the detector trace:
/// `t,S_eta,alarm` with a method comment header.
pub fn write_baseline_trace_csv(
    report: &BaselineReport,
    method: &str,
    mut writer: impl Write,
) -> Result<()> {
    writeln!(writer, "# method={method}")?;
    writeln!(writer, "t,S_eta,alarm")?;
    for &(t, s) in &report.trace {
        let alarm = report.alarm_tick == Some(t);
        writeln!(writer, "{t},{s},{}", alarm as u8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::measurement_loglik_node;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Direct definition: largest tail sum of log-likelihood ratios,
    /// clamped at zero.
    fn cusum_direct(xs: &[f64], mu1: f64) -> f64 {
        let llr: Vec<f64> = xs.iter().map(|&x| mu1 * x - 0.5 * mu1 * mu1).collect();
        let mut best = 0.0f64;
        for k in 0..llr.len() {
            let tail: f64 = llr[k..].iter().sum();
            if tail > best {
                best = tail;
            }
        }
        best
    }

    #[test]
    fn cusum_hand_value() {
        let s = cusum_step(CusumState { w: 0.0 }, 1.0, 1.0);
        assert!((s.w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cusum_reflects_at_zero() {
        let mut s = CusumState::default();
        for _ in 0..50 {
            s = cusum_step(s, -10.0, 1.0);
            assert_eq!(s.w, 0.0);
        }
    }

    #[test]
    fn cusum_recursion_equals_direct_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for &mu1 in &[1.0, 2.0, 2.5] {
                let mut s = CusumState::default();
                for (t, &x) in xs.iter().enumerate() {
                    s = cusum_step(s, x, mu1);
                    let direct = cusum_direct(&xs[..=t], mu1);
                    assert!(
                        (s.w - direct).abs() < 1e-9,
                        "tick {t}, mu1 {mu1}: recursion {} vs direct {direct}",
                        s.w
                    );
                }
            }
        }
    }

    #[test]
    fn multichart_is_top_eta_sum() {
        let states = [
            CusumState { w: 3.0 },
            CusumState { w: 1.0 },
            CusumState { w: 2.0 },
        ];
        assert_eq!(multichart_cusum(&states, 2), 5.0);
        assert_eq!(multichart_cusum(&states, 1), 3.0);
        assert_eq!(multichart_cusum(&states, 3), 6.0);
        let zeros = [CusumState::default(); 4];
        assert_eq!(multichart_cusum(&zeros, 2), 0.0);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn multichart_rejects_large_eta() {
        let states = [CusumState::default(); 2];
        multichart_cusum(&states, 3);
    }

    #[test]
    fn window_glr_zero_row_values() {
        let row = [0.0; 10];
        // with the floor at 1 the optimum is exactly the null fit
        assert!(window_glr_node(&row, 1.0).abs() < 1e-12);
        // with a smaller floor the sigma term pays out at the earliest tick
        let (k, v) = window_glr_node_detail(&row, 0.1);
        assert_eq!(k, 0);
        assert!((v - 10.0 * 10.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn window_glr_matches_measurement_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let row: Vec<f64> = (0..15).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let null = measurement_loglik_node(&row, None, 0.1);
            let direct = (0..row.len())
                .map(|k| measurement_loglik_node(&row, Some(k), 0.1) - null)
                .fold(f64::NEG_INFINITY, f64::max);
            let fast = window_glr_node(&row, 0.1);
            assert!((fast - direct).abs() < 1e-9, "{fast} vs {direct}");
        }
    }

    #[test]
    fn window_glr_finds_an_injected_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut misses = 0;
        for _ in 0..20 {
            let row: Vec<f64> = (0..30)
                .map(|c| {
                    let z: f64 = rng.sample(StandardNormal);
                    if c >= 18 {
                        5.0 + z
                    } else {
                        z
                    }
                })
                .collect();
            let (k, _) = window_glr_node_detail(&row, 0.1);
            if k != 18 {
                misses += 1;
            }
        }
        assert!(misses <= 1, "argmax missed the change tick {misses} times");
    }

    #[test]
    fn multichart_run_reports_crossing() {
        let rows: Vec<Vec<f64>> = (0..100).map(|_| vec![1.0, 0.0, 1.0]).collect();
        let report = run_multichart(rows.clone(), 3, 1.0, 2, 5.0);
        // two streams drift at 0.5 per tick, so the top-2 sum crosses 5
        // strictly after tick 5
        assert_eq!(report.alarm_tick, Some(6));
        let censored = run_multichart(rows, 3, 1.0, 2, f64::INFINITY);
        assert_eq!(censored.alarm_tick, None);
        assert_eq!(censored.last_tick, 100);
    }

    #[test]
    fn baseline_trace_csv_has_detector_schema() {
        let report = run_multichart(vec![vec![1.0]; 8], 1, 1.0, 1, 2.9);
        let mut buf = Vec::new();
        write_baseline_trace_csv(&report, "cusum", &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# method=cusum\nt,S_eta,alarm\n"));
        let (trace, alarm) = crate::detector::read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(trace, report.trace);
        assert_eq!(alarm, report.alarm_tick);
    }
}
