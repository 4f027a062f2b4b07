//! Experiment configuration and the calibrate / run / campaign pipelines.
//!
//! One JSON document composes scenario, attack, calibration, detector,
//! fusion, evaluation and campaign blocks. Every block has defaults except
//! the scenario.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{randomize, AttackError, AttackKindName, AttackRanges, AttackSchedule};
use crate::detect::{
    calibrate_all, CalibrationConfig, CalibrationReport, CusumConfig, DetectError, Detector, DetectorKind,
    DetectorModels, DetectorVerdict, IForestConfig, LstmConfig, ResidualSample,
};
use crate::eval::{score_detection, score_rmse, AccuracyReport, EvalError, RmseWindow, RunSummary};
use crate::fuse::{supervise, SupervisorConfig, TickRecord};
use crate::runlog::{log_rows, LogRow};
use crate::sim::{sense_all, simulate, NoiseConfig, Pose, RoadGeometry, RoadPiece, ScenarioConfig, SensorFrame, SimError, SpeedProfile, Simulation};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Errors caused by the configuration rather than by the computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Read { .. }
                | PipelineError::Parse { .. }
                | PipelineError::Sim(SimError::Config(_))
                | PipelineError::Attack(_)
                | PipelineError::Detect(DetectError::Config(_))
        )
    }
}

/// A scenario given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Path(PathBuf),
    Inline(Box<ScenarioConfig>),
}

impl ScenarioRef {
    /// Relative paths resolve against `base`.
    pub fn resolve(&self, base: &Path) -> Result<ScenarioConfig, PipelineError> {
        match self {
            ScenarioRef::Inline(cfg) => Ok((**cfg).clone()),
            ScenarioRef::Path(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Read { path: path.clone(), source })?;
                serde_json::from_str(&text).map_err(|source| PipelineError::Parse { path, source })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationBlock {
    /// Attack-free scenarios whose residuals train the detectors.
    pub scenarios: Vec<ScenarioRef>,
    pub settings: CalibrationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorsBlock {
    pub enabled: Vec<DetectorKind>,
    pub lstm: LstmConfig,
    pub cusum: CusumConfig,
    pub iforest: IForestConfig,
}

impl Default for DetectorsBlock {
    fn default() -> Self {
        DetectorsBlock {
            enabled: DetectorKind::ALL.to_vec(),
            lstm: LstmConfig::default(),
            cusum: CusumConfig::default(),
            iforest: IForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub rmse_window: RmseWindow,
}

/// Monte-Carlo campaign: `runs` scenarios per attack kind, with roads taken
/// in rotation and attacks drawn from `ranges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub runs: usize,
    pub kinds: Vec<AttackKindName>,
    pub ranges: AttackRanges,
    pub roads: Vec<RoadGeometry>,
    pub duration: f64,
    pub speed: f64,
    pub lane_offset: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
    /// Also run every scenario with mitigation off for the RMSE comparison.
    pub compare_mitigation: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            runs: 50,
            kinds: vec![AttackKindName::ConstantBias, AttackKindName::Stealth],
            ranges: AttackRanges::default(),
            roads: default_roads(),
            duration: 80.0,
            speed: 10.0,
            lane_offset: -1.75,
            noise: NoiseConfig::CARLA_LIKE,
            seed: 0,
            compare_mitigation: true,
        }
    }
}

/// Straight, a gentle left arc, and an S-bend.
pub fn default_roads() -> Vec<RoadGeometry> {
    vec![
        RoadGeometry::Straight,
        RoadGeometry::Arc { radius: 400.0 },
        RoadGeometry::Piecewise {
            pieces: vec![
                RoadPiece { length: 150.0, curvature: 0.0 },
                RoadPiece { length: 200.0, curvature: 1.0 / 300.0 },
                RoadPiece { length: 200.0, curvature: -1.0 / 300.0 },
                RoadPiece { length: 100.0, curvature: 0.0 },
            ],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioRef,
    #[serde(default)]
    pub attack: AttackSchedule,
    #[serde(default)]
    pub calibration: CalibrationBlock,
    #[serde(default)]
    pub detectors: DetectorsBlock,
    #[serde(default)]
    pub fusion: SupervisorConfig,
    #[serde(default)]
    pub eval: EvalBlock,
    #[serde(default)]
    pub campaign: CampaignConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let enabled = &self.detectors.enabled;
        if !enabled.is_empty() && !enabled.contains(&self.fusion.primary) {
            return Err(PipelineError::Config(format!(
                "primary detector {} is not enabled",
                self.fusion.primary.name()
            )));
        }
        let mut seen = enabled.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != enabled.len() {
            return Err(PipelineError::Config("detectors.enabled lists a detector twice".into()));
        }
        if !(self.fusion.t_hold >= 0.0) {
            return Err(PipelineError::Config("fusion.t_hold must be >= 0".into()));
        }
        self.fusion.ukf.validate().map_err(PipelineError::Config)?;
        let c = &self.campaign;
        if c.roads.is_empty() {
            return Err(PipelineError::Config("campaign.roads must not be empty".into()));
        }
        if !(c.duration > 0.0 && c.speed >= 0.0) {
            return Err(PipelineError::Config("campaign duration must be > 0 and speed >= 0".into()));
        }
        Ok(())
    }
}

/// Simulates every calibration scenario and returns its residual trace.
pub fn calibration_traces(
    cfg: &ExperimentConfig,
    base: &Path,
) -> Result<Vec<Vec<ResidualSample>>, PipelineError> {
    if cfg.calibration.scenarios.is_empty() {
        return Err(PipelineError::Config("calibration needs at least one attack-free scenario".into()));
    }
    cfg.calibration
        .scenarios
        .iter()
        .map(|s| {
            let sc = s.resolve(base)?;
            let sim = simulate(&sc)?;
            let trace = sense_all(&sim, &sc);
            let recs = supervise(&trace.frames, Vec::new(), &sim.map, &cfg.fusion, &sc.noise);
            Ok(recs.into_iter().map(|r| r.residual).collect())
        })
        .collect()
}

pub fn calibrate(cfg: &ExperimentConfig, base: &Path) -> Result<(DetectorModels, CalibrationReport), PipelineError> {
    let traces = calibration_traces(cfg, base)?;
    let d = &cfg.detectors;
    Ok(calibrate_all(&traces, &cfg.calibration.settings, &d.lstm, &d.cusum, &d.iforest)?)
}

/// Detectors in `enabled` order, built from `models`.
pub fn build_detectors(enabled: &[DetectorKind], models: Option<&DetectorModels>) -> Result<Vec<Box<dyn Detector + Send>>, PipelineError> {
    if enabled.is_empty() {
        return Ok(Vec::new());
    }
    let models = models.ok_or_else(|| PipelineError::Config("detectors are enabled but no models were given".into()))?;
    Ok(enabled.iter().map(|&k| models.detector(k)).collect())
}

/// Everything produced by one supervised run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub sim: Simulation,
    pub frames: Vec<SensorFrame>,
    pub truth: Vec<Pose>,
    pub mask: Vec<bool>,
    pub records: Vec<TickRecord>,
}

impl RunOutput {
    pub fn rows(&self) -> Vec<LogRow> {
        log_rows(&self.records, &self.frames, Some(&self.truth), &self.mask)
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn estimates(&self) -> Vec<[f64; 2]> {
        self.records.iter().map(|r| r.belief.position()).collect()
    }

    pub fn truth_xy(&self) -> Vec<[f64; 2]> {
        self.truth.iter().map(|p| [p.x, p.y]).collect()
    }

    pub fn verdicts(&self, kind: DetectorKind) -> Option<Vec<DetectorVerdict>> {
        let idx = self.records.first()?.verdicts.iter().position(|(k, _)| *k == kind)?;
        Some(self.records.iter().map(|r| r.verdicts[idx].1).collect())
    }

    pub fn detection(&self) -> Result<BTreeMap<DetectorKind, crate::eval::DetectionReport>, EvalError> {
        let mut out = BTreeMap::new();
        if let Some(first) = self.records.first() {
            for (k, _) in &first.verdicts {
                let v = self.verdicts(*k).unwrap_or_default();
                out.insert(*k, score_detection(&v, &self.mask)?);
            }
        }
        Ok(out)
    }

    /// RMSE over `window`; `None` when the window selects no ticks.
    pub fn accuracy(&self, window: &RmseWindow) -> Result<Option<AccuracyReport>, EvalError> {
        let sel = window.select(&self.times(), &self.mask);
        if !sel.iter().any(|&b| b) {
            return Ok(None);
        }
        score_rmse(&self.estimates(), &self.truth_xy(), &sel).map(Some)
    }
}

/// Simulates `scenario`, applies `attack`, and supervises the result.
pub fn run_scenario(
    scenario: &ScenarioConfig,
    attack: &AttackSchedule,
    fusion: &SupervisorConfig,
    detectors: Vec<Box<dyn Detector + Send>>,
) -> Result<RunOutput, PipelineError> {
    let sim = simulate(scenario)?;
    let trace = sense_all(&sim, scenario);
    let (frames, mask) = attack.apply(&trace.frames)?;
    let records = supervise(&frames, detectors, &sim.map, fusion, &scenario.noise);
    let truth = trace.truth.unwrap_or_default();
    Ok(RunOutput { sim, frames, truth, mask, records })
}

/// Resolves and runs the configured single experiment.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, models: Option<&DetectorModels>) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let scenario = cfg.scenario.resolve(base)?;
    let detectors = build_detectors(&cfg.detectors.enabled, models)?;
    run_scenario(&scenario, &cfg.attack, &cfg.fusion, detectors)
}

/// Scenario and attack of campaign run `run` for attack `kind`.
///
/// The scenario depends only on the run index, so every attack kind is
/// evaluated on identical drives.
pub fn campaign_run(c: &CampaignConfig, run: usize, kind: AttackKindName) -> Result<(ScenarioConfig, AttackSchedule), PipelineError> {
    let seed = c.seed.wrapping_add(run as u64);
    let scenario = ScenarioConfig {
        road: c.roads[run % c.roads.len()].clone(),
        lane_offset: c.lane_offset,
        speed: SpeedProfile::Constant { speed: c.speed },
        duration: c.duration,
        noise: c.noise,
        seed,
        ..ScenarioConfig::straight(c.duration, seed)
    };
    let spec = randomize(seed ^ 0x5eed_a77a_c4ed_0000, c.duration, kind, &c.ranges)?;
    let schedule = if spec.is_none() { AttackSchedule::default() } else { AttackSchedule::new(vec![spec])? };
    Ok((scenario, schedule))
}

pub fn kind_label(kind: AttackKindName) -> &'static str {
    match kind {
        AttackKindName::None => "none",
        AttackKindName::ConstantBias => "constant_bias",
        AttackKindName::Stealth => "stealth",
    }
}

/// One campaign run: scores plus the per-tick log of the mitigated run.
#[derive(Debug, Clone)]
pub struct CampaignRun {
    pub summary: RunSummary,
    pub output: RunOutput,
}

/// Runs `cfg.campaign.runs` scenarios for every attack kind, calling
/// `on_run` as each finishes (kind-major, run-minor order).
pub fn run_campaign(
    cfg: &ExperimentConfig,
    models: Option<&DetectorModels>,
    mut on_run: impl FnMut(&CampaignRun) -> Result<(), PipelineError>,
) -> Result<Vec<RunSummary>, PipelineError> {
    cfg.validate()?;
    let c = &cfg.campaign;
    let mut out = Vec::new();
    for &kind in &c.kinds {
        for run in 0..c.runs {
            let (scenario, attack) = campaign_run(c, run, kind)?;
            let detectors = build_detectors(&cfg.detectors.enabled, models)?;
            let output = run_scenario(&scenario, &attack, &cfg.fusion, detectors)?;
            let accuracy_unmitigated = if c.compare_mitigation {
                let off = SupervisorConfig { mitigation: false, ..cfg.fusion };
                run_scenario(&scenario, &attack, &off, Vec::new())?.accuracy(&cfg.eval.rmse_window)?
            } else {
                None
            };
            let summary = RunSummary {
                run,
                seed: scenario.seed,
                attack: kind_label(kind).to_string(),
                detection: output.detection()?,
                accuracy: output.accuracy(&cfg.eval.rmse_window)?,
                accuracy_unmitigated,
            };
            let done = CampaignRun { summary, output };
            on_run(&done)?;
            out.push(done.summary);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackSpec;

    fn base() -> ExperimentConfig {
        serde_json::from_str(r#"{"scenario": {"road": {"kind": "straight"}, "lane_offset": -1.75, "speed": {"kind": "constant", "speed": 10.0}, "duration": 20.0}}"#).unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = base();
        assert_eq!(cfg.detectors.enabled, DetectorKind::ALL.to_vec());
        assert_eq!(cfg.campaign.runs, 50);
        assert!(cfg.attack.specs().is_empty());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_field_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"scenario": "a.json", "fusoin": {}}"#).unwrap_err();
        assert!(err.to_string().contains("fusoin"));
    }

    #[test]
    fn missing_scenario_file_names_path() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"scenario": "nowhere/scn.json"}"#).unwrap();
        let err = cfg.scenario.resolve(Path::new("/tmp")).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("/tmp/nowhere/scn.json"), "{err}");
    }

    #[test]
    fn primary_must_be_enabled() {
        let mut cfg = base();
        cfg.detectors.enabled = vec![DetectorKind::Cusum];
        assert!(cfg.validate().is_err());
        cfg.fusion.primary = DetectorKind::Cusum;
        cfg.validate().unwrap();
    }

    #[test]
    fn detector_free_run_follows_gps() {
        let mut cfg = base();
        cfg.detectors.enabled.clear();
        cfg.attack = AttackSchedule::new(vec![AttackSpec::constant([0.0, 2.0], 5.0, 20.0)]).unwrap();
        let out = run_experiment(&cfg, Path::new("."), None).unwrap();
        assert_eq!(out.records.len(), 201);
        assert_eq!(out.mask.iter().filter(|&&m| m).count(), 151);
        let acc = out.accuracy(&RmseWindow::Attack).unwrap().unwrap();
        assert!(acc.rmse_y > 1.0, "{acc:?}");
    }

    #[test]
    fn campaign_runs_share_drives_across_kinds() {
        let c = CampaignConfig::default();
        let (a, atk_a) = campaign_run(&c, 4, AttackKindName::ConstantBias).unwrap();
        let (b, atk_b) = campaign_run(&c, 4, AttackKindName::Stealth).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.road, c.roads[1]);
        assert_eq!(atk_a.specs()[0].t_start, atk_b.specs()[0].t_start);
        let (_, none) = campaign_run(&c, 4, AttackKindName::None).unwrap();
        assert!(none.specs().is_empty());
    }
}
