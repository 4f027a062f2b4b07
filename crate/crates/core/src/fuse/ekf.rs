use nalgebra::{Matrix2, Vector2};

use super::{motion_model, sanitize_cov, Belief, ControlInput};

/// Predict with the motion model (unit Jacobian in position) and `q`, then
/// update with a GPS position fix of variance `r` per axis.
pub fn ekf_step(belief: &Belief, u: &ControlInput, q: &Matrix2<f64>, gps: [f64; 2], r: f64, t: f64) -> Belief {
    let x = motion_model(&belief.mean, u);
    let p = belief.cov + q;
    let rm = Matrix2::identity() * r;
    let s = p + rm;
    let Some(s_inv) = s.try_inverse() else {
        return Belief { mean: x, cov: sanitize_cov(&p), mode: belief.mode, t };
    };
    let k = p * s_inv;
    let z = Vector2::new(gps[0], gps[1]);
    let mean = x + k * (z - x);
    let ik = Matrix2::identity() - k;
    // Joseph form keeps the covariance symmetric positive semidefinite.
    let cov = sanitize_cov(&(ik * p * ik.transpose() + k * rm * k.transpose()));
    Belief { mean, cov, mode: belief.mode, t }
}
