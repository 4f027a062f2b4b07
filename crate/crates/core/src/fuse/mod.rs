//! Position filters and the detection/mitigation supervisor.
//!
//! Normal mode fuses GPS and IMU with an EKF. In mitigation mode GPS is
//! ignored and a UKF fuses IMU dead reckoning with the camera lateral
//! distance, using map matching as the measurement function.

mod ekf;
mod supervisor;
mod ukf;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::sim::{ImuReading, NoiseConfig};

pub use ekf::ekf_step;
pub use supervisor::{supervise, Supervisor, SupervisorConfig, TickRecord};
pub use ukf::{sigma_points, ukf_predict, ukf_update, Prediction, UkfConfig, SIGMA_COUNT, STATE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Normal,
    Mitigation,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Mitigation => "mitigation",
        }
    }
}

/// Position estimate `(x, y)` with covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Belief {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub mode: Mode,
    pub t: f64,
}

impl Belief {
    pub fn new(mean: [f64; 2], variance: f64, t: f64) -> Self {
        Belief { mean: Vector2::new(mean[0], mean[1]), cov: Matrix2::identity() * variance, mode: Mode::Normal, t }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.mean.x, self.mean.y]
    }
}

/// IMU-supplied speed, yaw rate and heading over one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
    pub heading: f64,
    pub dt: f64,
}

impl ControlInput {
    pub fn from_imu(imu: &ImuReading, dt: f64) -> Self {
        ControlInput { v: imu.v, omega: imu.omega, heading: imu.heading, dt }
    }
}

/// Unicycle step. The displacement is the chord of the arc swept at
/// constant speed and yaw rate: length `v dt sinc(omega dt / 2)` along the
/// mid-step heading, which is exact for constant-curvature motion.
pub fn motion_model(x: &Vector2<f64>, u: &ControlInput) -> Vector2<f64> {
    let half = 0.5 * u.omega * u.dt;
    let sinc = if half.abs() < 1e-6 { 1.0 - half * half / 6.0 } else { half.sin() / half };
    let len = u.v * u.dt * sinc;
    let (s, c) = (u.heading + half).sin_cos();
    Vector2::new(x.x + len * c, x.y + len * s)
}

/// Process noise from IMU noise: `(sigma_v dt)^2` along the heading and
/// `(v sigma_theta dt)^2` across it, plus `floor` on the diagonal.
pub fn process_noise(u: &ControlInput, noise: &NoiseConfig, floor: f64) -> Matrix2<f64> {
    let along = (noise.sigma_v * u.dt).powi(2);
    let across = (u.v * noise.sigma_theta * u.dt).powi(2);
    let (s, c) = u.heading.sin_cos();
    let r = Matrix2::new(c, -s, s, c);
    r * Matrix2::new(along, 0.0, 0.0, across) * r.transpose() + Matrix2::identity() * floor
}

/// Symmetric part of `p`, with negative eigenvalues clamped to zero when
/// there are any.
pub fn sanitize_cov(p: &Matrix2<f64>) -> Matrix2<f64> {
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let q = eig.eigenvectors * d * eig.eigenvectors.transpose();
    (q + q.transpose()) * 0.5
}

/// Symmetric square root after clamping negative eigenvalues; `None` if it
/// is not finite.
pub fn sym_sqrt(p: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let eig = SymmetricEigen::new((p + p.transpose()) * 0.5);
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let s = eig.eigenvectors * d * eig.eigenvectors.transpose();
    s.iter().all(|v| v.is_finite()).then_some(s)
}
