//! Scripted ground truth and synthetic GPS / IMU / camera observations.

mod camera;
mod road;
mod sense;
mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lane_map::{LaneMap, MapError};

pub use camera::{fit_cubic_points, fit_lane_cubic, CUBIC_MIN_POINTS};
pub use road::{Road, RoadGeometry, RoadPiece, RoadPose};
pub use sense::{sense, SensorStreams};
pub use trace::{ingest_csv, parse_trace, write_trace, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Ground-truth vehicle state at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Heading in `(-pi, pi]`.
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

impl VehicleState {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuReading {
    pub v: f64,
    pub omega: f64,
    pub heading: f64,
}

/// Cubic lane model `f(x) = c0 + c1 x + c2 x^2 + c3 x^3` in the vehicle
/// frame (x forward, y left). `c0` is the camera's lateral distance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LaneObservation {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub valid: bool,
}

impl LaneObservation {
    pub const INVALID: LaneObservation = LaneObservation { c0: 0.0, c1: 0.0, c2: 0.0, c3: 0.0, valid: false };

    pub fn eval(&self, x: f64) -> f64 {
        self.c0 + x * (self.c1 + x * (self.c2 + x * self.c3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub t: f64,
    pub gps: [f64; 2],
    pub imu: ImuReading,
    pub lane_obs: LaneObservation,
}

/// Planar pose used for truth columns of traces and logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl From<&VehicleState> for Pose {
    fn from(s: &VehicleState) -> Self {
        Pose { x: s.x, y: s.y, heading: s.heading }
    }
}

/// Frame stream with optional aligned ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub frames: Vec<SensorFrame>,
    pub truth: Option<Vec<Pose>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_gps: f64,
    pub sigma_v: f64,
    pub sigma_omega: f64,
    pub sigma_theta: f64,
    pub sigma_cam: f64,
}

impl NoiseConfig {
    /// Consumer-grade sensors.
    pub const CARLA_LIKE: NoiseConfig =
        NoiseConfig { sigma_gps: 0.5, sigma_v: 0.1, sigma_omega: 0.01, sigma_theta: 0.005, sigma_cam: 0.05 };
    /// High-precision sensors.
    pub const IDEAL: NoiseConfig =
        NoiseConfig { sigma_gps: 0.02, sigma_v: 0.005, sigma_omega: 0.0005, sigma_theta: 0.0005, sigma_cam: 0.005 };
    pub const ZERO: NoiseConfig = NoiseConfig { sigma_gps: 0.0, sigma_v: 0.0, sigma_omega: 0.0, sigma_theta: 0.0, sigma_cam: 0.0 };

    fn all(&self) -> [f64; 5] {
        [self.sigma_gps, self.sigma_v, self.sigma_omega, self.sigma_theta, self.sigma_cam]
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::CARLA_LIKE
    }
}

/// Speed along the vehicle's own path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedProfile {
    Constant { speed: f64 },
    /// Linear interpolation between `[t, v]` breakpoints, held outside.
    Piecewise { points: Vec<[f64; 2]> },
}

impl SpeedProfile {
    pub fn speed_at(&self, t: f64) -> f64 {
        match self {
            SpeedProfile::Constant { speed } => *speed,
            SpeedProfile::Piecewise { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if t <= first[0] {
                    return first[1];
                }
                if t >= last[0] {
                    return last[1];
                }
                let i = points.partition_point(|p| p[0] <= t);
                let (a, b) = (points[i - 1], points[i]);
                a[1] + (b[1] - a[1]) * (t - a[0]) / (b[0] - a[0])
            }
        }
    }

    /// Distance covered on `[0, t]`, integrated exactly.
    pub fn distance_at(&self, t: f64) -> f64 {
        match self {
            SpeedProfile::Constant { speed } => speed * t,
            SpeedProfile::Piecewise { points } => {
                let mut knots: Vec<f64> = vec![0.0];
                knots.extend(points.iter().map(|p| p[0]).filter(|&k| k > 0.0 && k < t));
                knots.push(t);
                knots
                    .windows(2)
                    .map(|w| 0.5 * (self.speed_at(w[0]) + self.speed_at(w[1])) * (w[1] - w[0]))
                    .sum()
            }
        }
    }

    fn max_speed(&self) -> f64 {
        match self {
            SpeedProfile::Constant { speed } => *speed,
            SpeedProfile::Piecewise { points } => points.iter().map(|p| p[1]).fold(0.0, f64::max),
        }
    }
}

fn default_window() -> f64 {
    40.0
}
fn default_lead_in() -> f64 {
    30.0
}
fn default_spacing() -> f64 {
    1.0
}
fn default_rate() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub road: RoadGeometry,
    /// Vehicle position relative to the lane reference line, left positive.
    pub lane_offset: f64,
    pub speed: SpeedProfile,
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub tick_rate: f64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_spacing")]
    pub map_spacing: f64,
    /// Forward camera range used for the lane fit.
    #[serde(default = "default_window")]
    pub camera_window: f64,
    /// Map coverage behind the start point.
    #[serde(default = "default_lead_in")]
    pub lead_in: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn straight(duration: f64, seed: u64) -> Self {
        ScenarioConfig {
            road: RoadGeometry::Straight,
            lane_offset: -1.75,
            speed: SpeedProfile::Constant { speed: 10.0 },
            duration,
            tick_rate: default_rate(),
            noise: NoiseConfig::default(),
            map_spacing: default_spacing(),
            camera_window: default_window(),
            lead_in: default_lead_in(),
            seed,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    pub fn tick_count(&self) -> usize {
        (self.duration * self.tick_rate).round() as usize + 1
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.tick_rate.is_finite() && self.tick_rate > 0.0) {
            return bad(format!("tick_rate must be > 0, got {}", self.tick_rate));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if self.noise.all().iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise sigmas must be finite and >= 0".into());
        }
        if !(self.map_spacing.is_finite() && self.map_spacing > 0.0) {
            return bad(format!("map_spacing must be > 0, got {}", self.map_spacing));
        }
        if !(self.camera_window.is_finite() && self.camera_window > 0.0) || !(self.lead_in >= 0.0) {
            return bad("camera_window must be > 0 and lead_in >= 0".into());
        }
        if !self.lane_offset.is_finite() {
            return bad("lane_offset must be finite".into());
        }
        match &self.speed {
            SpeedProfile::Constant { speed } if !(speed.is_finite() && *speed >= 0.0) => {
                return bad(format!("speed must be >= 0, got {speed}"))
            }
            SpeedProfile::Piecewise { points } => {
                if points.is_empty() {
                    return bad("speed profile needs at least one breakpoint".into());
                }
                if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite() && p[1] >= 0.0)) {
                    return bad("speed breakpoints must be finite with v >= 0".into());
                }
                if points.windows(2).any(|w| w[1][0] <= w[0][0]) {
                    return bad("speed breakpoint times must increase".into());
                }
            }
            _ => {}
        }
        match &self.road {
            RoadGeometry::Arc { radius } if !(radius.is_finite() && *radius != 0.0) => {
                return bad("arc radius must be finite and nonzero".into())
            }
            RoadGeometry::Piecewise { pieces } => {
                if pieces.is_empty() {
                    return bad("piecewise road needs at least one piece".into());
                }
                if pieces.iter().any(|p| !(p.length.is_finite() && p.length > 0.0 && p.curvature.is_finite())) {
                    return bad("road pieces need finite positive length and finite curvature".into());
                }
            }
            _ => {}
        }
        for k in self.road.pieces().iter().map(|p| p.curvature) {
            if self.lane_offset * k >= 1.0 {
                return bad("lane_offset reaches the centre of curvature".into());
            }
        }
        Ok(())
    }
}

/// Road, map and ground truth for one scenario.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub road: Road,
    pub map: LaneMap,
    pub truth: Vec<VehicleState>,
}

/// Ground truth along the road at the configured lane offset.
///
/// Poses are evaluated in closed form at each tick's path length, i.e. the
/// unicycle `x += v dt cos(theta)`, `y += v dt sin(theta)`,
/// `theta += omega dt` integrated exactly between ticks.
pub fn generate_truth(cfg: &ScenarioConfig) -> Result<Vec<VehicleState>, SimError> {
    cfg.validate()?;
    let road = Road::new(&cfg.road);
    Ok(truth_on(&road, cfg))
}

fn truth_on(road: &Road, cfg: &ScenarioConfig) -> Vec<VehicleState> {
    let dt = cfg.dt();
    (0..cfg.tick_count())
        .map(|k| {
            let t = k as f64 * dt;
            let s = road.ref_length_for(cfg.speed.distance_at(t), cfg.lane_offset);
            let pose = road.pose_at(s);
            let [x, y] = pose.offset(cfg.lane_offset);
            let v = cfg.speed.speed_at(t);
            let kappa = pose.curvature / (1.0 - cfg.lane_offset * pose.curvature);
            VehicleState { t, x, y, heading: pose.heading, speed: v, yaw_rate: v * kappa }
        })
        .collect()
}

/// Builds road, map (covering the whole drive plus the camera window) and
/// ground truth.
pub fn simulate(cfg: &ScenarioConfig) -> Result<Simulation, SimError> {
    cfg.validate()?;
    let road = Road::new(&cfg.road);
    let travel = cfg.speed.max_speed() * cfg.duration;
    let scale = road.curvatures().map(|k| 1.0 - cfg.lane_offset * k).fold(f64::INFINITY, f64::min);
    let s_max = travel / scale + 2.0 * cfg.camera_window + 20.0;
    let map = road.build_map(-cfg.lead_in, s_max, cfg.map_spacing)?;
    let truth = truth_on(&road, cfg);
    Ok(Simulation { road, map, truth })
}

/// Runs the sensor models over a whole truth sequence.
pub fn sense_all(sim: &Simulation, cfg: &ScenarioConfig) -> Trace {
    let mut streams = SensorStreams::new(cfg.seed);
    let frames = sim.truth.iter().map(|s| sense(s, &sim.map, cfg, &mut streams)).collect();
    Trace { frames, truth: Some(sim.truth.iter().map(Pose::from).collect()) }
}
