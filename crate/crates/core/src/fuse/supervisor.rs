use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{ekf_step, process_noise, ukf_predict, ukf_update, Belief, ControlInput, Mode, UkfConfig};
use crate::detect::{residual, Detector, DetectorKind, DetectorVerdict, ResidualSample, ResidualSource};
use crate::lane_map::{match_lateral, LaneMap, MatchConfig};
use crate::sim::{NoiseConfig, SensorFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisorConfig {
    /// Switch to the GPS-free filter on alarm. Off keeps the EKF running
    /// whatever the detectors say.
    pub mitigation: bool,
    /// Seconds after the last alarm before GPS is readmitted.
    pub t_hold: f64,
    /// Consecutive alarm-free ticks also required before readmission.
    pub readmit_ticks: usize,
    pub residual_source: ResidualSource,
    /// Detector whose alarm drives the mode.
    pub primary: DetectorKind,
    pub matching: MatchConfig,
    pub ukf: UkfConfig,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            mitigation: true,
            t_hold: 2.0,
            readmit_ticks: 5,
            residual_source: ResidualSource::Gps,
            primary: DetectorKind::Lstm,
            matching: MatchConfig::default(),
            ukf: UkfConfig::default(),
        }
    }
}

/// Everything the supervisor decided at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub mode: Mode,
    /// Alarm of the primary detector.
    pub alarm: bool,
    pub score: Option<f64>,
    pub threshold: f64,
    pub belief: Belief,
    pub residual: ResidualSample,
    pub verdicts: Vec<(DetectorKind, DetectorVerdict)>,
    /// A mitigation-mode measurement update was skipped (no camera or no
    /// map match for some sigma point).
    pub update_skipped: bool,
    pub cov_reset: bool,
}

/// Per-run state machine: residual, detectors, mode, then filter.
pub struct Supervisor<'a> {
    map: &'a LaneMap,
    cfg: SupervisorConfig,
    noise: NoiseConfig,
    detectors: Vec<Box<dyn Detector + Send>>,
    primary: Option<usize>,
    belief: Option<Belief>,
    prev: Option<SensorFrame>,
    mode: Mode,
    last_alarm: f64,
    clean_run: usize,
}

impl<'a> Supervisor<'a> {
    /// `noise` is the sensor model the filters assume.
    pub fn new(
        map: &'a LaneMap,
        cfg: SupervisorConfig,
        noise: NoiseConfig,
        detectors: Vec<Box<dyn Detector + Send>>,
    ) -> Self {
        let primary = detectors.iter().position(|d| d.kind() == cfg.primary);
        Supervisor {
            map,
            cfg,
            noise,
            detectors,
            primary,
            belief: None,
            prev: None,
            mode: Mode::Normal,
            last_alarm: f64::NEG_INFINITY,
            clean_run: 0,
        }
    }

    pub fn step(&mut self, frame: &SensorFrame) -> TickRecord {
        let position = match (self.cfg.residual_source, &self.belief) {
            (ResidualSource::Belief, Some(b)) => b.position(),
            _ => frame.gps,
        };
        let res = residual(frame, position, self.map, &self.cfg.matching);
        let verdicts: Vec<(DetectorKind, DetectorVerdict)> = self.detectors.iter_mut().map(|d| (d.kind(), d.step(&res))).collect();
        let primary = self.primary.map(|i| verdicts[i].1);
        let alarm = primary.is_some_and(|v| v.alarm);

        if alarm {
            self.last_alarm = frame.t;
            self.clean_run = 0;
            if self.cfg.mitigation {
                self.mode = Mode::Mitigation;
            }
        } else {
            self.clean_run += 1;
            if self.mode == Mode::Mitigation
                && frame.t - self.last_alarm >= self.cfg.t_hold - 1e-9
                && self.clean_run >= self.cfg.readmit_ticks
            {
                self.mode = Mode::Normal;
            }
        }

        let mut update_skipped = false;
        let mut cov_reset = false;
        let belief = match (&self.belief, &self.prev) {
            (Some(b), Some(prev)) => {
                let u = ControlInput::from_imu(&prev.imu, frame.t - prev.t);
                let q = process_noise(&u, &self.noise, self.cfg.ukf.q_floor);
                match self.mode {
                    Mode::Normal => ekf_step(b, &u, &q, frame.gps, self.noise.sigma_gps.powi(2), frame.t),
                    Mode::Mitigation => {
                        let pred = ukf_predict(&b.mean, &b.cov, &u, &q, &self.cfg.ukf);
                        cov_reset = pred.cov_reset;
                        let update = if frame.lane_obs.valid {
                            let heading = frame.imu.heading;
                            let (map, matching) = (self.map, &self.cfg.matching);
                            let h = |x: &Vector2<f64>| match_lateral([x.x, x.y], heading, map, matching).ok().map(|f| f.d_map);
                            ukf_update(&pred, frame.lane_obs.c0, self.noise.sigma_cam.powi(2), &self.cfg.ukf, h)
                        } else {
                            None
                        };
                        let (mean, cov) = update.unwrap_or_else(|| {
                            update_skipped = true;
                            (pred.mean, pred.cov)
                        });
                        Belief { mean, cov, mode: Mode::Mitigation, t: frame.t }
                    }
                }
            }
            _ => Belief::new(frame.gps, self.noise.sigma_gps.powi(2).max(self.cfg.ukf.q_floor), frame.t),
        };
        let belief = Belief { mode: self.mode, ..belief };
        self.belief = Some(belief);
        self.prev = Some(*frame);

        TickRecord {
            t: frame.t,
            mode: self.mode,
            alarm,
            score: primary.and_then(|v| v.score),
            threshold: primary.map_or(f64::NAN, |v| v.threshold),
            belief,
            residual: res,
            verdicts,
            update_skipped,
            cov_reset,
        }
    }
}

/// Runs the supervisor over a whole frame stream.
pub fn supervise(
    frames: &[SensorFrame],
    detectors: Vec<Box<dyn Detector + Send>>,
    map: &LaneMap,
    cfg: &SupervisorConfig,
    noise: &NoiseConfig,
) -> Vec<TickRecord> {
    let mut sup = Supervisor::new(map, *cfg, *noise, detectors);
    frames.iter().map(|f| sup.step(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{apply, AttackSpec};
    use crate::detect::{CusumDetector, CusumModel};
    use crate::sim::{sense_all, simulate, NoiseConfig, ScenarioConfig};

    /// CUSUM with a tight known threshold: good enough to drive the mode in
    /// scripted runs without calibration.
    fn cusum(h: f64) -> Vec<Box<dyn Detector + Send>> {
        vec![Box::new(CusumDetector::new(CusumModel { mu0: 0.0, kappa: 1.0, h, hysteresis_m: 1 }))]
    }

    fn cfg() -> SupervisorConfig {
        SupervisorConfig { primary: DetectorKind::Cusum, ..SupervisorConfig::default() }
    }

    #[test]
    fn attack_free_stays_normal() {
        let sc = ScenarioConfig { noise: NoiseConfig::IDEAL, ..ScenarioConfig::straight(30.0, 2) };
        let sim = simulate(&sc).unwrap();
        let trace = sense_all(&sim, &sc);
        let recs = supervise(&trace.frames, cusum(1.0), &sim.map, &cfg(), &sc.noise);
        assert!(recs.iter().all(|r| r.mode == Mode::Normal && !r.alarm));
    }

    #[test]
    fn mitigation_covers_alarms_and_recovers() {
        let sc = ScenarioConfig { noise: NoiseConfig::IDEAL, ..ScenarioConfig::straight(40.0, 2) };
        let sim = simulate(&sc).unwrap();
        let trace = sense_all(&sim, &sc);
        let (frames, mask) = apply(&trace.frames, &AttackSpec::constant([0.0, 2.0], 10.0, 20.0)).unwrap();
        let recs = supervise(&frames, cusum(1.0), &sim.map, &cfg(), &sc.noise);
        assert!(recs.iter().all(|r| !r.alarm || r.mode == Mode::Mitigation));
        let first_alarm = recs.iter().position(|r| r.alarm).unwrap();
        assert!(mask[first_alarm]);
        // Estimate stays on the true position while GPS is 2 m off.
        let truth = trace.truth.as_ref().unwrap();
        for (r, p) in recs.iter().zip(truth).filter(|(r, _)| r.mode == Mode::Mitigation) {
            assert!((r.belief.mean.y - p.y).abs() < 0.1);
        }
        // Back to normal once the attack is over and the hold-off passed.
        let last_alarm_t = recs.iter().filter(|r| r.alarm).map(|r| r.t).fold(0.0, f64::max);
        let back = recs.iter().find(|r| r.t > last_alarm_t && r.mode == Mode::Normal).unwrap();
        assert!(back.t >= last_alarm_t + 2.0 - 1e-9);
        assert_eq!(recs.last().unwrap().mode, Mode::Normal);
    }

    #[test]
    fn mitigation_off_keeps_ekf() {
        let sc = ScenarioConfig { noise: NoiseConfig::IDEAL, ..ScenarioConfig::straight(30.0, 2) };
        let sim = simulate(&sc).unwrap();
        let trace = sense_all(&sim, &sc);
        let (frames, _) = apply(&trace.frames, &AttackSpec::constant([0.0, 2.0], 10.0, 20.0)).unwrap();
        let c = SupervisorConfig { mitigation: false, ..cfg() };
        let recs = supervise(&frames, cusum(1.0), &sim.map, &c, &sc.noise);
        assert!(recs.iter().any(|r| r.alarm));
        assert!(recs.iter().all(|r| r.mode == Mode::Normal));
    }

    #[test]
    fn camera_pulls_lateral_error_down() {
        // Noise-free camera, no GPS: a 1 m lateral offset is corrected
        // within ten ticks.
        let sc = ScenarioConfig { noise: NoiseConfig::ZERO, ..ScenarioConfig::straight(10.0, 2) };
        let sim = simulate(&sc).unwrap();
        let trace = sense_all(&sim, &sc);
        let truth = trace.truth.as_ref().unwrap();
        let noise = NoiseConfig { sigma_cam: 0.05, sigma_v: 0.01, sigma_theta: 0.001, ..NoiseConfig::ZERO };
        let ucfg = UkfConfig::default();
        let mut b = Belief::new([truth[0].x, truth[0].y + 1.0], 1.0, 0.0);
        for k in 1..=10 {
            let f = &trace.frames[k];
            let u = ControlInput::from_imu(&trace.frames[k - 1].imu, 0.1);
            let pred = ukf_predict(&b.mean, &b.cov, &u, &process_noise(&u, &noise, ucfg.q_floor), &ucfg);
            let h = |x: &Vector2<f64>| match_lateral([x.x, x.y], f.imu.heading, &sim.map, &MatchConfig::default()).ok().map(|m| m.d_map);
            let (mean, cov) = ukf_update(&pred, f.lane_obs.c0, noise.sigma_cam.powi(2), &ucfg, h).unwrap();
            b = Belief { mean, cov, ..b };
        }
        assert!((b.mean.y - truth[10].y).abs() < 0.01, "{}", b.mean.y - truth[10].y);
    }
}
