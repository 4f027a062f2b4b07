use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{fit_lane_cubic, ImuReading, ScenarioConfig, SensorFrame, VehicleState};
use crate::angle::wrap;
use crate::lane_map::LaneMap;

/// Independent noise streams derived from one master seed, one per sensor,
/// so that changing one noise level never reshuffles the others.
#[derive(Debug, Clone)]
pub struct SensorStreams {
    gps: ChaCha8Rng,
    imu: ChaCha8Rng,
    camera: ChaCha8Rng,
}

impl SensorStreams {
    pub const GPS_STREAM: u64 = 1;
    pub const IMU_STREAM: u64 = 2;
    pub const CAMERA_STREAM: u64 = 3;

    pub fn new(seed: u64) -> Self {
        let stream = |id| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        SensorStreams { gps: stream(Self::GPS_STREAM), imu: stream(Self::IMU_STREAM), camera: stream(Self::CAMERA_STREAM) }
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    sigma * n
}

/// One tick of GPS, IMU and camera observations of `state`.
///
/// Every stream draws the same number of samples per tick whatever the
/// noise levels, so zero-noise channels still stay aligned.
pub fn sense(state: &VehicleState, map: &LaneMap, cfg: &ScenarioConfig, streams: &mut SensorStreams) -> SensorFrame {
    let n = &cfg.noise;
    let gps = [state.x + gauss(&mut streams.gps, n.sigma_gps), state.y + gauss(&mut streams.gps, n.sigma_gps)];
    let imu = ImuReading {
        v: state.speed + gauss(&mut streams.imu, n.sigma_v),
        omega: state.yaw_rate + gauss(&mut streams.imu, n.sigma_omega),
        heading: wrap(state.heading + gauss(&mut streams.imu, n.sigma_theta)),
    };
    let mut lane_obs = fit_lane_cubic(state, map, cfg.camera_window);
    let cam_noise = gauss(&mut streams.camera, n.sigma_cam);
    if lane_obs.valid {
        lane_obs.c0 += cam_noise;
    }
    SensorFrame { t: state.t, gps, imu, lane_obs }
}
