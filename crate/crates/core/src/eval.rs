//! Detection and localization scoring, and campaign aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{DetectorKind, DetectorVerdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty RMSE window")]
    EmptyWindow,
    #[error("no runs to aggregate")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Tick-level precision/recall and per-episode delay.
///
/// Precision is 1 when nothing was flagged and recall is 1 when there was
/// nothing to flag, so an attack-free run with no alarms scores perfectly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    pub episodes: usize,
    /// Delay of each detected episode, seconds.
    pub delays: Vec<f64>,
    pub missed: usize,
}

impl DetectionReport {
    pub fn mean_delay(&self) -> Option<f64> {
        (!self.delays.is_empty()).then(|| sorted_sum(&self.delays) / self.delays.len() as f64)
    }

    pub fn false_alarm_rate(&self) -> f64 {
        let neg = self.counts.fp + self.counts.tn;
        if neg == 0 {
            0.0
        } else {
            self.counts.fp as f64 / neg as f64
        }
    }
}

/// Scores alarms against the ground-truth attack mask.
pub fn score_alarms(times: &[f64], alarms: &[bool], mask: &[bool]) -> Result<DetectionReport, EvalError> {
    if alarms.len() != mask.len() {
        return Err(EvalError::LengthMismatch(alarms.len(), mask.len()));
    }
    if times.len() != mask.len() {
        return Err(EvalError::LengthMismatch(times.len(), mask.len()));
    }
    let mut c = Confusion::default();
    for (&a, &m) in alarms.iter().zip(mask) {
        match (a, m) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let precision = if c.tp + c.fp == 0 { 1.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = if c.tp + c.fn_ == 0 { 1.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };

    let mut episodes = 0;
    let mut delays = Vec::new();
    let mut missed = 0;
    let mut i = 0;
    while i < mask.len() {
        if !mask[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < mask.len() && mask[i] {
            i += 1;
        }
        episodes += 1;
        match (start..i).find(|&j| alarms[j]) {
            Some(j) => delays.push(times[j] - times[start]),
            None => missed += 1,
        }
    }
    Ok(DetectionReport { precision, recall, f1, counts: c, episodes, delays, missed })
}

pub fn score_detection(verdicts: &[DetectorVerdict], mask: &[bool]) -> Result<DetectionReport, EvalError> {
    let times: Vec<f64> = verdicts.iter().map(|v| v.t).collect();
    let alarms: Vec<bool> = verdicts.iter().map(|v| v.alarm).collect();
    score_alarms(&times, &alarms, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_xy: f64,
    pub samples: usize,
}

/// Which ticks an RMSE is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RmseWindow {
    /// Ticks under attack.
    #[default]
    Attack,
    All,
    Range {
        t_start: f64,
        t_end: f64,
    },
}

impl RmseWindow {
    pub fn select(&self, times: &[f64], mask: &[bool]) -> Vec<bool> {
        match *self {
            RmseWindow::Attack => mask.to_vec(),
            RmseWindow::All => vec![true; times.len()],
            RmseWindow::Range { t_start, t_end } => times.iter().map(|&t| t >= t_start && t <= t_end).collect(),
        }
    }
}

/// Per-axis RMSE over the selected samples; the combined value uses the
/// per-sample Euclidean error.
pub fn score_rmse(est: &[[f64; 2]], truth: &[[f64; 2]], window: &[bool]) -> Result<AccuracyReport, EvalError> {
    if est.len() != truth.len() {
        return Err(EvalError::LengthMismatch(est.len(), truth.len()));
    }
    if est.len() != window.len() {
        return Err(EvalError::LengthMismatch(est.len(), window.len()));
    }
    let (mut sx, mut sy, mut sxy, mut n) = (0.0, 0.0, 0.0, 0usize);
    for ((e, t), _) in est.iter().zip(truth).zip(window).filter(|(_, w)| **w) {
        let dx = e[0] - t[0];
        let dy = e[1] - t[1];
        sx += dx * dx;
        sy += dy * dy;
        sxy += dx * dx + dy * dy;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyWindow);
    }
    let n_f = n as f64;
    Ok(AccuracyReport { rmse_x: (sx / n_f).sqrt(), rmse_y: (sy / n_f).sqrt(), rmse_xy: (sxy / n_f).sqrt(), samples: n })
}

/// Scores of one campaign run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    /// Attack label, e.g. `constant_bias`.
    pub attack: String,
    pub detection: BTreeMap<DetectorKind, DetectionReport>,
    pub accuracy: Option<AccuracyReport>,
    /// Same run with mitigation disabled, when requested.
    pub accuracy_unmitigated: Option<AccuracyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Sum of `v` in ascending order, so that the result does not depend on
/// the input order.
fn sorted_sum(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum()
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let mut dev: Vec<f64> = s.iter().map(|v| (v - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        let std = (dev.iter().sum::<f64>() / n as f64).sqrt();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Some(Stat { mean, std, median, min: s[0], max: s[n - 1], n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    /// Over all detected episodes of all runs.
    pub delay: Option<Stat>,
    pub episodes: usize,
    pub missed: usize,
    pub false_alarm_rate: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub rmse_x: Stat,
    pub rmse_y: Stat,
    /// `mean` is the mean across runs and `max` the worst run.
    pub rmse_xy: Stat,
}

impl AccuracySummary {
    fn of(reports: &[AccuracyReport]) -> Option<Self> {
        let pick = |f: fn(&AccuracyReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        Some(AccuracySummary { rmse_x: pick(|r| r.rmse_x)?, rmse_y: pick(|r| r.rmse_y)?, rmse_xy: pick(|r| r.rmse_xy)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub runs: usize,
    pub detectors: BTreeMap<DetectorKind, DetectorSummary>,
    pub accuracy: Option<AccuracySummary>,
    pub accuracy_unmitigated: Option<AccuracySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub runs: usize,
    pub attacks: BTreeMap<String, AttackSummary>,
}

/// Means, spreads and medians per attack label and detector. Independent
/// of run order.
pub fn aggregate(runs: &[RunSummary]) -> Result<CampaignSummary, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let mut by_attack: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_attack.entry(r.attack.clone()).or_default().push(r);
    }
    let mut attacks = BTreeMap::new();
    for (label, rs) in by_attack {
        let mut detectors = BTreeMap::new();
        let kinds: std::collections::BTreeSet<DetectorKind> = rs.iter().flat_map(|r| r.detection.keys().copied()).collect();
        for k in kinds {
            let reps: Vec<&DetectionReport> = rs.iter().filter_map(|r| r.detection.get(&k)).collect();
            let col = |f: fn(&DetectionReport) -> f64| Stat::of(&reps.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("nonempty");
            let delays: Vec<f64> = reps.iter().flat_map(|r| r.delays.iter().copied()).collect();
            detectors.insert(
                k,
                DetectorSummary {
                    precision: col(|r| r.precision),
                    recall: col(|r| r.recall),
                    f1: col(|r| r.f1),
                    delay: Stat::of(&delays),
                    episodes: reps.iter().map(|r| r.episodes).sum(),
                    missed: reps.iter().map(|r| r.missed).sum(),
                    false_alarm_rate: col(|r| r.false_alarm_rate()),
                },
            );
        }
        let acc: Vec<AccuracyReport> = rs.iter().filter_map(|r| r.accuracy).collect();
        let unm: Vec<AccuracyReport> = rs.iter().filter_map(|r| r.accuracy_unmitigated).collect();
        attacks.insert(
            label,
            AttackSummary { runs: rs.len(), detectors, accuracy: AccuracySummary::of(&acc), accuracy_unmitigated: AccuracySummary::of(&unm) },
        );
    }
    Ok(CampaignSummary { runs: runs.len(), attacks })
}

/// Detection table (attack, detector, precision, recall, F1, delay) and
/// localization table (with and without mitigation).
pub fn format_tables(summary: &CampaignSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Detection ({} runs)", summary.runs);
    let _ = writeln!(out, "{:<16} {:<9} {:>9} {:>9} {:>9} {:>9} {:>9}", "Attack", "Detector", "Precision", "Recall", "F1", "Delay(s)", "Median(s)");
    for (label, a) in &summary.attacks {
        for (k, d) in &a.detectors {
            let (mean, median) = d.delay.as_ref().map_or(("-".to_string(), "-".to_string()), |s| (format!("{:.2}", s.mean), format!("{:.2}", s.median)));
            let _ = writeln!(
                out,
                "{:<16} {:<9} {:>9.3} {:>9.3} {:>9.3} {:>9} {:>9}",
                label,
                k.name(),
                d.precision.mean,
                d.recall.mean,
                d.f1.mean,
                mean,
                median
            );
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Localization RMSE over the attack window (m)");
    let _ = writeln!(out, "{:<16} {:<20} {:>9} {:>9} {:>9} {:>9}", "Attack", "Method", "x", "y", "xy", "max xy");
    for (label, a) in &summary.attacks {
        for (name, acc) in [("Mitigation", &a.accuracy), ("Without mitigation", &a.accuracy_unmitigated)] {
            if let Some(s) = acc {
                let _ = writeln!(
                    out,
                    "{:<16} {:<20} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                    label, name, s.rmse_x.mean, s.rmse_y.mean, s.rmse_xy.mean, s.rmse_xy.max
                );
            }
        }
    }
    out
}
