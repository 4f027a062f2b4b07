//! Camera/map residual and the three anomaly detectors run on it.

mod cusum;
mod iforest;
mod lstm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lane_map::{match_lateral, LaneMap, MatchConfig};
use crate::sim::SensorFrame;

pub use cusum::{CusumConfig, CusumDetector, CusumModel};
pub use iforest::{average_path_length, IForestConfig, IForestDetector, IForestModel, IsolationTree, TreeNode};
pub use lstm::{
    finite_difference_check, GradientCheck, LstmConfig, LstmDetector, LstmModel, LstmWeights, TrainReport,
    LSTM_FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `z = d_cam - d_map` at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub t: f64,
    pub z: f64,
    pub valid: bool,
    /// Camera lateral distance (`C0`), NaN when unavailable.
    pub d_cam: f64,
    /// Map-matched lateral distance, NaN when unavailable.
    pub d_map: f64,
}

impl ResidualSample {
    pub fn invalid(t: f64) -> Self {
        ResidualSample { t, z: f64::NAN, valid: false, d_cam: f64::NAN, d_map: f64::NAN }
    }

    pub fn value(&self) -> Option<f64> {
        self.valid.then_some(self.z)
    }
}

/// Residual between the camera lane offset and the map-matched lateral
/// distance of `position`, using the IMU heading.
pub fn residual(frame: &SensorFrame, position: [f64; 2], map: &LaneMap, cfg: &MatchConfig) -> ResidualSample {
    let d_cam = if frame.lane_obs.valid { frame.lane_obs.c0 } else { f64::NAN };
    let d_map = match_lateral(position, frame.imu.heading, map, cfg).map(|f| f.d_map).unwrap_or(f64::NAN);
    let valid = d_cam.is_finite() && d_map.is_finite();
    ResidualSample { t: frame.t, z: if valid { d_cam - d_map } else { f64::NAN }, valid, d_cam, d_map }
}

/// Which position the residual's map match uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// The raw GPS fix of the current frame.
    #[default]
    Gps,
    /// The current belief mean.
    Belief,
}

/// One detector decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub t: f64,
    pub alarm: bool,
    /// Detector statistic; `None` when no decision could be made and the
    /// previous alarm state was held.
    pub score: Option<f64>,
    pub threshold: f64,
}

impl DetectorVerdict {
    pub fn decided(&self) -> bool {
        self.score.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Lstm,
    Cusum,
    Iforest,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [DetectorKind::Lstm, DetectorKind::Cusum, DetectorKind::Iforest];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Lstm => "lstm",
            DetectorKind::Cusum => "cusum",
            DetectorKind::Iforest => "iforest",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(DetectorKind::Lstm),
            "cusum" => Ok(DetectorKind::Cusum),
            "iforest" => Ok(DetectorKind::Iforest),
            other => Err(format!("unknown detector {other:?} (expected lstm, cusum or iforest)")),
        }
    }
}

/// Streaming detector over residual samples.
pub trait Detector {
    fn kind(&self) -> DetectorKind;
    fn step(&mut self, sample: &ResidualSample) -> DetectorVerdict;
    fn reset(&mut self);
}

/// Raises the alarm once the score has exceeded the threshold on `m`
/// consecutive decided ticks; undecided ticks hold the current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hysteresis {
    m: usize,
    run: usize,
    alarm: bool,
}

impl Hysteresis {
    pub fn new(m: usize) -> Self {
        Hysteresis { m: m.max(1), run: 0, alarm: false }
    }

    pub fn update(&mut self, exceeded: Option<bool>) -> bool {
        match exceeded {
            Some(true) => {
                self.run += 1;
                self.alarm = self.run >= self.m;
            }
            Some(false) => {
                self.run = 0;
                self.alarm = false;
            }
            None => {}
        }
        self.alarm
    }

    pub fn alarm(&self) -> bool {
        self.alarm
    }

    pub fn reset(&mut self) {
        *self = Hysteresis::new(self.m);
    }
}

/// Attack-free residual traces split into training and held-out parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSplit {
    pub train: Vec<Vec<ResidualSample>>,
    pub holdout: Vec<Vec<ResidualSample>>,
}

/// Keeps the first `1 - holdout` of every trace for fitting and the rest
/// for threshold calibration.
pub fn split_traces(traces: &[Vec<ResidualSample>], holdout: f64) -> ResidualSplit {
    let mut split = ResidualSplit { train: Vec::new(), holdout: Vec::new() };
    for tr in traces {
        let cut = ((1.0 - holdout) * tr.len() as f64).round() as usize;
        split.train.push(tr[..cut].to_vec());
        split.holdout.push(tr[cut..].to_vec());
    }
    split
}

/// Linear-interpolated empirical quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs a detector over a residual trace from a fresh state.
pub fn run_detector(det: &mut dyn Detector, samples: &[ResidualSample]) -> Vec<DetectorVerdict> {
    det.reset();
    samples.iter().map(|s| det.step(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Fraction at the end of every trace held out for thresholds.
    pub holdout: f64,
    /// Tick-level false-alarm budget for quantile-calibrated thresholds.
    pub fa_budget: f64,
    pub hysteresis_m: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { holdout: 0.25, fa_budget: 0.01, hysteresis_m: 1, seed: 0 }
    }
}

/// The three calibrated detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModels {
    pub lstm: LstmModel,
    pub cusum: CusumModel,
    pub iforest: IForestModel,
}

impl DetectorModels {
    pub fn detector(&self, kind: DetectorKind) -> Box<dyn Detector + Send> {
        match kind {
            DetectorKind::Lstm => Box::new(LstmDetector::new(self.lstm.clone())),
            DetectorKind::Cusum => Box::new(CusumDetector::new(self.cusum.clone())),
            DetectorKind::Iforest => Box::new(IForestDetector::new(self.iforest.clone())),
        }
    }
}

/// Held-out tick-level false-alarm rate per detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub train_ticks: usize,
    pub holdout_ticks: usize,
    pub lstm_final_loss: f64,
    pub false_alarm_rate: Vec<(DetectorKind, f64)>,
}

/// Fits all three detectors on attack-free residual traces.
pub fn calibrate_all(
    traces: &[Vec<ResidualSample>],
    cal: &CalibrationConfig,
    lstm_cfg: &LstmConfig,
    cusum_cfg: &CusumConfig,
    iforest_cfg: &IForestConfig,
) -> Result<(DetectorModels, CalibrationReport), DetectError> {
    if !(cal.holdout > 0.0 && cal.holdout < 1.0) {
        return Err(DetectError::Config(format!("holdout must be in (0, 1), got {}", cal.holdout)));
    }
    if !(cal.fa_budget > 0.0 && cal.fa_budget < 1.0) {
        return Err(DetectError::Config(format!("fa_budget must be in (0, 1), got {}", cal.fa_budget)));
    }
    let split = split_traces(traces, cal.holdout);
    let (lstm, train) = LstmModel::train(&split, lstm_cfg, cal.hysteresis_m, cal.seed)?;
    let cusum = CusumModel::calibrate(&split, cusum_cfg, cal.fa_budget, cal.hysteresis_m)?;
    let iforest = IForestModel::calibrate(&split, iforest_cfg, cal.fa_budget, cal.hysteresis_m, cal.seed)?;
    let models = DetectorModels { lstm, cusum, iforest };
    let holdout_ticks: usize = split.holdout.iter().map(Vec::len).sum();
    let false_alarm_rate = DetectorKind::ALL
        .iter()
        .map(|&k| {
            let mut det = models.detector(k);
            let alarms: usize =
                split.holdout.iter().map(|tr| run_detector(det.as_mut(), tr).iter().filter(|v| v.alarm).count()).sum();
            (k, alarms as f64 / holdout_ticks.max(1) as f64)
        })
        .collect();
    let report = CalibrationReport {
        train_ticks: split.train.iter().map(Vec::len).sum(),
        holdout_ticks,
        lstm_final_loss: train.epoch_losses.last().copied().unwrap_or(f64::NAN),
        false_alarm_rate,
    };
    Ok((models, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{apply, AttackSpec};
    use crate::sim::{sense_all, simulate, LaneObservation, NoiseConfig, ScenarioConfig};

    #[test]
    fn residual_zero_without_noise() {
        let mut cfg = ScenarioConfig::straight(10.0, 3);
        cfg.noise = NoiseConfig::ZERO;
        let sim = simulate(&cfg).unwrap();
        let trace = sense_all(&sim, &cfg);
        for f in &trace.frames {
            let r = residual(f, f.gps, &sim.map, &MatchConfig::default());
            assert!(r.valid && r.z.abs() <= 1e-6);
        }
    }

    #[test]
    fn residual_sees_lateral_bias() {
        let mut cfg = ScenarioConfig::straight(10.0, 3);
        cfg.noise = NoiseConfig::ZERO;
        let sim = simulate(&cfg).unwrap();
        let trace = sense_all(&sim, &cfg);
        let (attacked, mask) = apply(&trace.frames, &AttackSpec::constant([0.0, 2.0], 2.0, 8.0)).unwrap();
        for (f, m) in attacked.iter().zip(mask) {
            let r = residual(f, f.gps, &sim.map, &MatchConfig::default());
            let expect = if m { 2.0 } else { 0.0 };
            assert!((r.z.abs() - expect).abs() <= 1e-6, "{} vs {expect}", r.z);
        }
    }

    #[test]
    fn residual_invalid_without_camera() {
        let mut cfg = ScenarioConfig::straight(2.0, 3);
        cfg.noise = NoiseConfig::ZERO;
        let sim = simulate(&cfg).unwrap();
        let mut f = sense_all(&sim, &cfg).frames[5];
        f.lane_obs = LaneObservation::INVALID;
        assert!(!residual(&f, f.gps, &sim.map, &MatchConfig::default()).valid);
        let far = [f.gps[0], f.gps[1] + 500.0];
        let f2 = sense_all(&sim, &cfg).frames[5];
        assert!(!residual(&f2, far, &sim.map, &MatchConfig::default()).valid);
    }

    #[test]
    fn hysteresis_counts_consecutive() {
        let mut h = Hysteresis::new(3);
        let seq = [Some(true), Some(true), None, Some(true), Some(true), Some(false), Some(true)];
        let out: Vec<bool> = seq.iter().map(|e| h.update(*e)).collect();
        assert_eq!(out, [false, false, false, true, true, false, false]);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
    }

    #[test]
    fn split_keeps_order() {
        let tr: Vec<ResidualSample> =
            (0..8).map(|i| ResidualSample { t: i as f64, z: 0.0, valid: true, d_cam: 0.0, d_map: 0.0 }).collect();
        let s = split_traces(&[tr], 0.25);
        assert_eq!(s.train[0].len(), 6);
        assert_eq!(s.holdout[0][0].t, 6.0);
    }
}
