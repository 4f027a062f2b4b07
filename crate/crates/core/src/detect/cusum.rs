use serde::{Deserialize, Serialize};

use super::{mean_std, quantile, DetectError, Detector, DetectorKind, DetectorVerdict, Hysteresis, ResidualSample, ResidualSplit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CusumConfig {
    /// Drift as a multiple of the attack-free residual std.
    pub drift_sigmas: f64,
}

impl Default for CusumConfig {
    fn default() -> Self {
        CusumConfig { drift_sigmas: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumModel {
    pub mu0: f64,
    pub kappa: f64,
    pub h: f64,
    pub hysteresis_m: usize,
}

impl CusumModel {
    /// `mu0` and the drift from the training split; `h` is the
    /// `1 - fa_budget` quantile of the statistic over the held-out split.
    pub fn calibrate(split: &ResidualSplit, cfg: &CusumConfig, fa_budget: f64, hysteresis_m: usize) -> Result<Self, DetectError> {
        let train = || split.train.iter().flatten().filter_map(ResidualSample::value);
        if train().count() < 2 {
            return Err(DetectError::InsufficientData("CUSUM needs at least two valid training residuals".into()));
        }
        let (mu0, sigma) = mean_std(train());
        let mut model = CusumModel { mu0, kappa: cfg.drift_sigmas * sigma, h: 0.0, hysteresis_m };
        let mut stats = Vec::new();
        for tr in &split.holdout {
            let mut det = CusumDetector::new(model.clone());
            stats.extend(tr.iter().filter_map(|s| det.step(s).score));
        }
        if stats.is_empty() {
            return Err(DetectError::InsufficientData("CUSUM needs held-out residuals".into()));
        }
        model.h = quantile(&stats, 1.0 - fa_budget);
        Ok(model)
    }
}

/// Two-sided CUSUM. Invalid samples leave the sums untouched.
#[derive(Debug, Clone)]
pub struct CusumDetector {
    model: CusumModel,
    s_pos: f64,
    s_neg: f64,
    hyst: Hysteresis,
}

impl CusumDetector {
    pub fn new(model: CusumModel) -> Self {
        let hyst = Hysteresis::new(model.hysteresis_m);
        CusumDetector { model, s_pos: 0.0, s_neg: 0.0, hyst }
    }

    pub fn sums(&self) -> (f64, f64) {
        (self.s_pos, self.s_neg)
    }

    pub fn model(&self) -> &CusumModel {
        &self.model
    }
}

impl Detector for CusumDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Cusum
    }

    fn step(&mut self, sample: &ResidualSample) -> DetectorVerdict {
        let m = &self.model;
        let score = sample.value().map(|z| {
            let e = z - m.mu0;
            self.s_pos = (self.s_pos + e - m.kappa).max(0.0);
            self.s_neg = (self.s_neg - e - m.kappa).max(0.0);
            self.s_pos.max(self.s_neg)
        });
        let alarm = self.hyst.update(score.map(|s| s > m.h));
        DetectorVerdict { t: sample.t, alarm, score, threshold: m.h }
    }

    fn reset(&mut self) {
        self.s_pos = 0.0;
        self.s_neg = 0.0;
        self.hyst.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, z: f64) -> ResidualSample {
        ResidualSample { t, z, valid: true, d_cam: z, d_map: 0.0 }
    }

    fn model(mu0: f64, kappa: f64, h: f64) -> CusumModel {
        CusumModel { mu0, kappa, h, hysteresis_m: 1 }
    }

    #[test]
    fn on_target_stays_zero() {
        let mut d = CusumDetector::new(model(0.3, 0.1, 1.0));
        for k in 0..1000 {
            let v = d.step(&sample(k as f64, 0.3));
            assert!(!v.alarm);
            assert_eq!(d.sums(), (0.0, 0.0));
        }
    }

    #[test]
    fn step_change_alarm_tick() {
        for (delta, kappa, h) in [(1.0f64, 0.25, 2.1), (0.7, 0.3, 5.0), (-2.0, 0.5, 3.3)] {
            let mut d = CusumDetector::new(model(0.0, kappa, h));
            for k in 0..20 {
                assert!(!d.step(&sample(k as f64, 0.0)).alarm);
            }
            let expected = (h / (delta.abs() - kappa)).ceil() as usize;
            let first = (1..1000).find(|_| d.step(&sample(0.0, delta)).alarm).unwrap();
            assert_eq!(first, expected, "delta {delta}");
        }
    }

    #[test]
    fn alternating_half_drift_no_alarm() {
        let mut d = CusumDetector::new(model(0.0, 0.2, 0.15));
        for k in 0..1000 {
            let z = if k % 2 == 0 { 0.1 } else { -0.1 };
            assert!(!d.step(&sample(k as f64, z)).alarm);
        }
    }

    #[test]
    fn invalid_holds_state() {
        let mut d = CusumDetector::new(model(0.0, 0.1, 0.5));
        for _ in 0..3 {
            d.step(&sample(0.0, 1.0));
        }
        let before = d.sums();
        let v = d.step(&ResidualSample::invalid(1.0));
        assert!(v.alarm && v.score.is_none());
        assert_eq!(d.sums(), before);
    }
}
