use nalgebra::{DMatrix, DVector};

use super::{LaneObservation, VehicleState};
use crate::lane_map::LaneMap;
use crate::LEFT_IS_POSITIVE;

/// A cubic needs four points.
pub const CUBIC_MIN_POINTS: usize = 4;

/// Points further than this to either side are not the ego lane.
const MAX_LATERAL: f64 = 20.0;

/// Search radius for picking the ego lane around the true position.
const EGO_LANE_RADIUS: f64 = 30.0;

/// Least-squares fit of `y = c0 + c1 x + c2 x^2 + c3 x^3`.
///
/// Abscissae are rescaled to `[-1, 1]`-ish before solving; coefficients
/// are returned in the original units. `None` when fewer than four points
/// are given or the system is rank deficient.
pub fn fit_cubic_points(xs: &[f64], ys: &[f64]) -> Option<[f64; 4]> {
    let n = xs.len();
    if n < CUBIC_MIN_POINTS || ys.len() != n {
        return None;
    }
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(scale > 0.0) {
        return None;
    }
    let a = DMatrix::from_fn(n, 4, |i, j| (xs[i] / scale).powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    if sv.min() <= smax * 1e-10 {
        return None;
    }
    let sol = svd.solve(&b, 0.0).ok()?;
    Some([sol[0], sol[1] / scale, sol[2] / (scale * scale), sol[3] / (scale * scale * scale)])
}

/// Camera lane model: cubic fitted to the ego lane's map points inside the
/// forward window, expressed in the vehicle frame (x forward, y left).
///
/// The ego lane is the lane closest to the vehicle. The observation is
/// invalid when no lane is near or fewer than four points are visible.
pub fn fit_lane_cubic(state: &VehicleState, map: &LaneMap, window: f64) -> LaneObservation {
    let Some(near) = map.nearest(state.position(), EGO_LANE_RADIUS, Some(state.heading)) else {
        return LaneObservation::INVALID;
    };
    let lane = map.segment(near.segment).lane();
    let (s, c) = state.heading.sin_cos();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in &map.lanes()[lane.0].points {
        let dx = p.x - state.x;
        let dy = p.y - state.y;
        let xv = c * dx + s * dy;
        let yv = -s * dx + c * dy;
        if (0.0..=window).contains(&xv) && yv.abs() <= MAX_LATERAL {
            xs.push(xv);
            ys.push(LEFT_IS_POSITIVE * yv);
        }
    }
    match fit_cubic_points(&xs, &ys) {
        Some([c0, c1, c2, c3]) if [c0, c1, c2, c3].iter().all(|v| v.is_finite()) => {
            LaneObservation { c0, c1, c2, c3, valid: true }
        }
        _ => LaneObservation::INVALID,
    }
}
