//! Camera/map cross-validation of GPS for a simulated autonomous vehicle.
//!
//! The lateral distance from the vehicle to its lane is measured twice:
//! once by the camera (constant term of a cubic lane fit) and once by
//! projecting the GPS fix onto a polyline HD map. Under a spoofing attack the
//! two disagree; the residual drives an LSTM predictor (with CUSUM and
//! isolation-forest baselines). On alarm, GPS is isolated and an unscented
//! Kalman filter fuses IMU dead reckoning with the camera lateral distance,
//! using map matching as the measurement function.
//!
//! Module map:
//!
//! - [`lane_map`]: polyline map, spatial index, projection and lateral matching
//! - [`sim`]: road geometry, ground truth, sensor synthesis, trace CSV
//! - [`attack`]: constant-bias and exponential stealth GPS spoofing
//! - [`detect`]: residuals and the three detectors with their calibration
//! - [`fuse`]: EKF/UKF filters and the detection/mitigation supervisor
//! - [`eval`]: detection and RMSE scoring, campaign aggregation
//! - [`pipeline`]: experiment configuration, calibration, runs and campaigns

pub mod angle;
pub mod attack;
pub mod detect;
pub mod eval;
pub mod fuse;
pub mod lane_map;
pub mod pipeline;
pub mod runlog;
pub mod sim;

/// Sign applied to lateral distances measured towards the vehicle's left.
///
/// Both the camera model (`C0`) and map matching (`d_map`) report a lateral
/// distance that is positive when the lane lies to the left of the vehicle.
pub const LEFT_IS_POSITIVE: f64 = 1.0;
