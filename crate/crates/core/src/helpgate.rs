//! The ask-for-help rule and its offline tuning.
//!
//! At runtime the gate fires once the monitored signal has been at or below
//! `epsilon` (value head) or at or above it (classifier failure probability)
//! for `nu` consecutive frames. Offline, [`sweep`] scores a grid of
//! `(epsilon, nu)` pairs with an episode-level confusion matrix where the
//! positive class is a failed episode and a positive prediction is "the gate
//! fired somewhere in the trace".

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("value trace is empty")]
    EmptyTrace,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("nu must be >= 1")]
    ZeroNu,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, GateError>;

/// Which model output the gate monitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateSignal {
    /// State value; low is bad. Fires on `value <= epsilon`.
    ValueHead,
    /// Failure probability; high is bad. Fires on `p >= epsilon`.
    ClassifierHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub epsilon: f64,
    pub nu: u32,
    pub signal: GateSignal,
}

impl GateConfig {
    pub fn new(epsilon: f64, nu: u32, signal: GateSignal) -> Result<Self> {
        if nu == 0 {
            return Err(GateError::ZeroNu);
        }
        Ok(Self { epsilon, nu, signal })
    }

    pub fn is_alarming(&self, signal: f64) -> bool {
        match self.signal {
            GateSignal::ValueHead => signal <= self.epsilon,
            GateSignal::ClassifierHead => signal >= self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GateState {
    pub consecutive_below: u32,
}

/// Advances the gate by one frame. Returns the new state and whether the gate
/// fires on this frame.
pub fn gate_update(state: GateState, signal: f64, config: &GateConfig) -> (GateState, bool) {
    if config.is_alarming(signal) {
        let c = (state.consecutive_below + 1).min(config.nu);
        (GateState { consecutive_below: c }, c == config.nu)
    } else {
        (GateState::default(), false)
    }
}

/// Offline replay of a complete trace: whether the gate fires and the frame
/// where it first does.
pub fn evaluate_episode(values: &[f64], config: &GateConfig) -> Result<(bool, Option<usize>)> {
    if values.is_empty() {
        return Err(GateError::EmptyTrace);
    }
    if config.nu == 0 {
        return Err(GateError::ZeroNu);
    }
    let mut run = 0u32;
    for (i, &v) in values.iter().enumerate() {
        if config.is_alarming(v) {
            run += 1;
            if run >= config.nu {
                return Ok((true, Some(i)));
            }
        } else {
            run = 0;
        }
    }
    Ok((false, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, failed: bool, fired: bool) {
        match (failed, fired) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; absent when either is.
    pub fn f1(&self) -> Option<f64> {
        self.precision()?;
        self.recall()?;
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            accuracy: self.accuracy(),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

/// A supervised episode for threshold tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub values: Vec<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub epsilon: f64,
    pub nu: u32,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub signal: GateSignal,
    pub epsilons: Vec<f64>,
    pub nus: Vec<u32>,
    /// Cells in `nu`-major order: `cells[n * epsilons.len() + e]`.
    pub cells: Vec<SweepCell>,
    pub best: Option<usize>,
}

impl SweepResult {
    pub fn cell(&self, nu_index: usize, eps_index: usize) -> &SweepCell {
        &self.cells[nu_index * self.epsilons.len() + eps_index]
    }

    pub fn best_cell(&self) -> Option<&SweepCell> {
        self.best.map(|i| &self.cells[i])
    }
}

/// Scores every `(epsilon, nu)` cell. The best cell maximizes F1; ties go to
/// the smaller `nu`, then the larger `epsilon`. Cells with undefined F1 are
/// never selected.
pub fn sweep(
    episodes: &[EpisodeTrace],
    epsilons: &[f64],
    nus: &[u32],
    signal: GateSignal,
) -> Result<SweepResult> {
    if epsilons.is_empty() || nus.is_empty() {
        return Err(GateError::EmptyGrid);
    }
    if nus.contains(&0) {
        return Err(GateError::ZeroNu);
    }
    let mut cells = Vec::with_capacity(epsilons.len() * nus.len());
    for &nu in nus {
        for &epsilon in epsilons {
            let config = GateConfig { epsilon, nu, signal };
            let mut confusion = ConfusionMatrix::default();
            for ep in episodes {
                let (fired, _) = evaluate_episode(&ep.values, &config)?;
                confusion.record(ep.failed, fired);
            }
            cells.push(SweepCell {
                epsilon,
                nu,
                confusion,
                metrics: confusion.metrics(),
            });
        }
    }
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some(f1) = c.metrics.f1 else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bc = &cells[b];
                let bf = bc.metrics.f1.unwrap();
                f1 > bf
                    || (f1 == bf && c.nu < bc.nu)
                    || (f1 == bf && c.nu == bc.nu && c.epsilon > bc.epsilon)
            }
        };
        if better {
            best = Some(i);
        }
    }
    Ok(SweepResult {
        signal,
        epsilons: epsilons.to_vec(),
        nus: nus.to_vec(),
        cells,
        best,
    })
}

/// Default value-head grid: epsilon in {-0.40, -0.35, ..., -0.05}.
pub fn default_value_epsilons() -> Vec<f64> {
    (0..8).map(|i| f64::from(-40 + 5 * i) / 100.0).collect()
}

/// Default classifier grid: failure probability in {0.30, 0.35, ..., 0.95}.
pub fn default_classifier_thresholds() -> Vec<f64> {
    (0..14).map(|i| f64::from(30 + 5 * i) / 100.0).collect()
}

/// Default persistence grid in frames: {5, 10, ..., 30}.
pub fn default_nus() -> Vec<u32> {
    (1..=6).map(|i| 5 * i).collect()
}

pub const HEATMAP_HEADER: &str = "epsilon,nu,tp,fp,tn,fn,precision,recall,f1,accuracy,best";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the sweep as CSV, one row per cell in grid order, with `best` set
/// to 1 on the selected cell. Undefined metrics are empty fields.
pub fn heatmap_csv(result: &SweepResult) -> String {
    let mut s = String::from(HEATMAP_HEADER);
    s.push('\n');
    for (i, c) in result.cells.iter().enumerate() {
        let m = &c.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.epsilon,
            c.nu,
            c.confusion.tp,
            c.confusion.fp,
            c.confusion.tn,
            c.confusion.fn_,
            opt(m.precision),
            opt(m.recall),
            opt(m.f1),
            opt(m.accuracy),
            u8::from(result.best == Some(i)),
        );
    }
    s
}

pub fn export_heatmap(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, heatmap_csv(result))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vgate(epsilon: f64, nu: u32) -> GateConfig {
        GateConfig::new(epsilon, nu, GateSignal::ValueHead).unwrap()
    }

    /// Independent linear scan: first index with `nu` consecutive values <= eps.
    fn scan_oracle(values: &[f64], eps: f64, nu: usize) -> Option<usize> {
        (0..values.len()).find(|&i| i + 1 >= nu && values[i + 1 - nu..=i].iter().all(|&v| v <= eps))
    }

    #[test]
    fn fires_after_reset_at_frame_39() {
        let mut trace = vec![-0.2; 19];
        trace.push(0.0);
        trace.extend(vec![-0.2; 20]);
        let cfg = vgate(-0.15, 20);
        assert_eq!(scan_oracle(&trace, -0.15, 20), Some(39));
        let mut st = GateState::default();
        let mut fired_at = None;
        for (i, &v) in trace.iter().enumerate() {
            let (next, fire) = gate_update(st, v, &cfg);
            st = next;
            if fire && fired_at.is_none() {
                fired_at = Some(i);
            }
        }
        assert_eq!(fired_at, Some(39));
        assert_eq!(evaluate_episode(&trace, &cfg).unwrap(), (true, Some(39)));
    }

    #[test]
    fn never_fires_above_threshold() {
        let cfg = vgate(-0.1, 3);
        let trace = [0.0, 0.5, 0.2, 1.0];
        assert_eq!(evaluate_episode(&trace, &cfg).unwrap(), (false, None));
        let mut st = GateState::default();
        for v in trace {
            let (n, fire) = gate_update(st, v, &cfg);
            assert!(!fire);
            st = n;
        }
    }

    #[test]
    fn nu_one_fires_immediately_and_counter_is_bounded() {
        let cfg = vgate(0.0, 1);
        let (st, fire) = gate_update(GateState::default(), -0.5, &cfg);
        assert!(fire);
        assert_eq!(st.consecutive_below, 1);
        let (st, _) = gate_update(st, -0.5, &cfg);
        assert!(st.consecutive_below <= cfg.nu);
        assert!(GateConfig::new(0.0, 0, GateSignal::ValueHead).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let cfg = vgate(-0.15, 1);
        assert!(gate_update(GateState::default(), -0.15, &cfg).1);
        let cls = GateConfig::new(0.7, 1, GateSignal::ClassifierHead).unwrap();
        assert!(gate_update(GateState::default(), 0.7, &cls).1);
        assert!(!gate_update(GateState::default(), 0.69, &cls).1);
    }

    #[test]
    fn constant_traces() {
        let cfg = vgate(-0.15, 20);
        assert_eq!(evaluate_episode(&[-1.0; 30], &cfg).unwrap(), (true, Some(19)));
        assert_eq!(evaluate_episode(&[1.0; 30], &cfg).unwrap(), (false, None));
        assert!(matches!(evaluate_episode(&[], &cfg), Err(GateError::EmptyTrace)));
    }

    #[test]
    fn precision_arithmetic_and_absent_metrics() {
        let m = ConfusionMatrix { tp: 86, fp: 14, tn: 0, fn_: 0 };
        assert_eq!(m.precision(), Some(0.86));
        let none = ConfusionMatrix { tp: 0, fp: 0, tn: 5, fn_: 3 };
        assert_eq!(none.precision(), None);
        assert_eq!(none.recall(), Some(0.0));
        assert_eq!(none.f1(), None);
        assert_eq!(none.accuracy(), Some(5.0 / 8.0));
    }

    #[test]
    fn tie_break_prefers_small_nu_then_large_epsilon() {
        // One failure that dips to -1 for 30 frames, one success that never dips.
        let episodes = vec![
            EpisodeTrace { values: vec![-1.0; 30], failed: true },
            EpisodeTrace { values: vec![0.5; 30], failed: false },
        ];
        let r = sweep(&episodes, &[-0.3, -0.2], &[5, 10], GateSignal::ValueHead).unwrap();
        let best = r.best_cell().unwrap();
        assert_eq!((best.nu, best.epsilon), (5, -0.2));
        assert_eq!(best.metrics.f1, Some(1.0));
    }

    #[test]
    fn heatmap_marks_best_and_leaves_undefined_empty() {
        let episodes = vec![
            EpisodeTrace { values: vec![0.5; 3], failed: true },
            EpisodeTrace { values: vec![0.5; 3], failed: false },
            EpisodeTrace { values: vec![-0.5; 3], failed: true },
        ];
        let r = sweep(&episodes, &[-0.9, -0.1, 0.9], &[1, 2, 5], GateSignal::ValueHead).unwrap();
        let csv = heatmap_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], HEATMAP_HEADER);
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[1..].iter().filter(|l| l.ends_with(",1")).count(), 1);
        // eps -0.9, nu 1: nothing fires -> precision empty, recall 0.
        assert_eq!(lines[1], "-0.9,1,0,0,1,2,,0,,0.3333333333333333,0");
        assert_eq!(csv, heatmap_csv(&r));
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(matches!(sweep(&[], &[], &[1], GateSignal::ValueHead), Err(GateError::EmptyGrid)));
        assert!(matches!(sweep(&[], &[0.0], &[], GateSignal::ValueHead), Err(GateError::EmptyGrid)));
    }

    #[test]
    fn default_grids() {
        let e = default_value_epsilons();
        assert_eq!(e.first(), Some(&-0.4));
        assert_eq!(e.last(), Some(&-0.05));
        assert!(e.contains(&-0.15));
        assert_eq!(default_nus(), vec![5, 10, 15, 20, 25, 30]);
    }
}
