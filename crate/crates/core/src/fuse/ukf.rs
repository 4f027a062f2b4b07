use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{motion_model, sanitize_cov, sym_sqrt, ControlInput};

pub const STATE_DIM: usize = 2;
pub const SIGMA_COUNT: usize = 2 * STATE_DIM + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UkfConfig {
    /// Sigma-point spread.
    pub kappa: f64,
    /// Added to the process-noise diagonal.
    pub q_floor: f64,
    /// Lower bound on the measurement variance.
    pub r_floor: f64,
    /// Covariance used when the square root fails.
    pub prior_var: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        UkfConfig { kappa: 1.0, q_floor: 1e-8, r_floor: 1e-8, prior_var: 1.0 }
    }
}

impl UkfConfig {
    /// `kappa / (N + kappa)` for the centre point, `1 / (2 (N + kappa))`
    /// for the others.
    pub fn weights(&self) -> [f64; SIGMA_COUNT] {
        let n = STATE_DIM as f64;
        let mut w = [1.0 / (2.0 * (n + self.kappa)); SIGMA_COUNT];
        w[0] = self.kappa / (n + self.kappa);
        w
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.kappa.is_finite() && STATE_DIM as f64 + self.kappa > 0.0) {
            return Err(format!("ukf kappa must satisfy N + kappa > 0, got {}", self.kappa));
        }
        if !(self.q_floor >= 0.0 && self.r_floor >= 0.0 && self.prior_var > 0.0) {
            return Err("ukf floors must be >= 0 and prior_var > 0".into());
        }
        Ok(())
    }
}

/// `mean`, then `mean +- sqrt((N + kappa) P)` columns.
pub fn sigma_points(mean: &Vector2<f64>, cov: &Matrix2<f64>, kappa: f64) -> Option<[Vector2<f64>; SIGMA_COUNT]> {
    let s = sym_sqrt(&(cov * (STATE_DIM as f64 + kappa)))?;
    let mut pts = [*mean; SIGMA_COUNT];
    for i in 0..STATE_DIM {
        let col = s.column(i).into_owned();
        pts[1 + i] = mean + col;
        pts[1 + STATE_DIM + i] = mean - col;
    }
    Some(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// Sigma points drawn from the predicted mean and covariance.
    pub sigma: [Vector2<f64>; SIGMA_COUNT],
    /// The prior covariance was reset because its square root failed.
    pub cov_reset: bool,
}

/// Propagates sigma points of `(mean, cov)` through the motion model and
/// adds `q`.
pub fn ukf_predict(mean: &Vector2<f64>, cov: &Matrix2<f64>, u: &ControlInput, q: &Matrix2<f64>, cfg: &UkfConfig) -> Prediction {
    let w = cfg.weights();
    let (pts, cov_reset) = match sigma_points(mean, cov, cfg.kappa) {
        Some(p) => (p, false),
        None => {
            log::warn!("covariance square root failed; resetting to prior");
            let prior = Matrix2::identity() * cfg.prior_var;
            (sigma_points(mean, &prior, cfg.kappa).expect("finite prior"), true)
        }
    };
    let prop = pts.map(|p| motion_model(&p, u));
    let x = prop.iter().zip(w).fold(Vector2::zeros(), |acc, (p, wi)| acc + p * wi);
    let p = prop.iter().zip(w).fold(*q, |acc, (pi, wi)| {
        let d = pi - x;
        acc + d * d.transpose() * wi
    });
    let cov = sanitize_cov(&p);
    let sigma = sigma_points(&x, &cov, cfg.kappa).unwrap_or([x; SIGMA_COUNT]);
    Prediction { mean: x, cov, sigma, cov_reset }
}

/// Scalar-measurement update. `h` maps a state to the predicted
/// measurement; `None` from any sigma point skips the update.
pub fn ukf_update(
    pred: &Prediction,
    y: f64,
    r: f64,
    cfg: &UkfConfig,
    h: impl Fn(&Vector2<f64>) -> Option<f64>,
) -> Option<(Vector2<f64>, Matrix2<f64>)> {
    let w = cfg.weights();
    let mut ys = [0.0; SIGMA_COUNT];
    for (yi, p) in ys.iter_mut().zip(&pred.sigma) {
        *yi = h(p)?;
    }
    let y_hat: f64 = ys.iter().zip(w).map(|(yi, wi)| yi * wi).sum();
    let mut p_y = r.max(cfg.r_floor);
    let mut p_xy = Vector2::zeros();
    for i in 0..SIGMA_COUNT {
        let dy = ys[i] - y_hat;
        p_y += w[i] * dy * dy;
        p_xy += (pred.sigma[i] - pred.mean) * (w[i] * dy);
    }
    let k = p_xy / p_y;
    let mean = pred.mean + k * (y - y_hat);
    let cov = sanitize_cov(&(pred.cov - k * p_y * k.transpose()));
    Some((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lane_map::{match_lateral, LaneMap, LaneRecord, MatchConfig};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
        let a = Matrix2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        a * a.transpose() + Matrix2::identity() * 0.01
    }

    #[test]
    fn weights_sum_to_one() {
        for kappa in [1.0, 0.5, 3.0, -1.0] {
            let w = UkfConfig { kappa, ..UkfConfig::default() }.weights();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(UkfConfig::default().weights(), [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]);
    }

    #[test]
    fn sigma_moments_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = UkfConfig::default();
        let w = cfg.weights();
        for _ in 0..200 {
            let p = random_spd(&mut rng);
            let m = Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let pts = sigma_points(&m, &p, cfg.kappa).unwrap();
            let mean = pts.iter().zip(w).fold(Vector2::zeros(), |a, (x, wi)| a + x * wi);
            let cov = pts.iter().zip(w).fold(Matrix2::zeros(), |a, (x, wi)| a + (x - m) * (x - m).transpose() * wi);
            assert!((mean - m).abs().max() < 1e-10);
            assert!((cov - p).abs().max() < 1e-10);
        }
    }

    #[test]
    fn degenerate_spread() {
        let u = ControlInput { v: 10.0, omega: 0.1, heading: 0.3, dt: 0.1 };
        let pred = ukf_predict(&Vector2::new(1.0, 2.0), &Matrix2::zeros(), &u, &Matrix2::zeros(), &UkfConfig::default());
        assert_eq!(pred.cov, Matrix2::zeros());
        assert!(pred.sigma.iter().all(|s| *s == pred.mean));
        assert_eq!(pred.mean, motion_model(&Vector2::new(1.0, 2.0), &u));
    }

    #[test]
    fn linear_prediction_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_spd(&mut rng);
            let q = random_spd(&mut rng);
            let m = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let u = ControlInput { v: rng.random_range(0.0..30.0), omega: 0.2, heading: rng.random_range(-3.0..3.0), dt: 0.1 };
            let pred = ukf_predict(&m, &p, &u, &q, &UkfConfig::default());
            assert!((pred.mean - motion_model(&m, &u)).abs().max() < 1e-12);
            assert!((pred.cov - (p + q)).abs().max() < 1e-12);
        }
    }

    fn straight_map() -> LaneMap {
        let pts = (-50..=300).map(|i| [i as f64, 0.0]).collect();
        LaneMap::build(vec![LaneRecord { lane_id: "a".into(), points: pts }], 1.0).unwrap()
    }

    #[test]
    fn map_matching_update_equals_scalar_kalman() {
        // Lane along the x axis: d_map = -y, a linear measurement.
        let map = straight_map();
        let h = |x: &Vector2<f64>| match_lateral([x.x, x.y], 0.0, &map, &MatchConfig::default()).ok().map(|f| f.d_map);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = UkfConfig::default();
        for _ in 0..200 {
            let p = random_spd(&mut rng) * 0.2;
            let m = Vector2::new(rng.random_range(20.0..200.0), rng.random_range(-3.0..3.0));
            let sigma = sigma_points(&m, &p, cfg.kappa).unwrap();
            let pred = Prediction { mean: m, cov: p, sigma, cov_reset: false };
            let r = 0.0025;
            let y = rng.random_range(-3.0..3.0);
            let (mean, cov) = ukf_update(&pred, y, r, &cfg, h).unwrap();
            let hm = nalgebra::RowVector2::new(0.0, -1.0);
            let s = (hm * p * hm.transpose())[(0, 0)] + r;
            let k = p * hm.transpose() / s;
            let km = m + k * (y - (hm * m)[(0, 0)]);
            let kp = (Matrix2::identity() - k * hm) * p;
            assert!((mean - km).abs().max() <= 1e-9);
            assert!((cov - kp).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn flipped_sign_diverges() {
        let map = straight_map();
        let good = |x: &Vector2<f64>| match_lateral([x.x, x.y], 0.0, &map, &MatchConfig::default()).ok().map(|f| f.d_map);
        let bad = |x: &Vector2<f64>| good(x).map(|d| -d);
        let cfg = UkfConfig::default();
        // Truth at y = -1.75: camera sees the lane 1.75 m to the left.
        let y_meas = 1.75;
        let m = Vector2::new(50.0, -1.0);
        let p = Matrix2::identity() * 0.5;
        let pred = Prediction { mean: m, cov: p, sigma: sigma_points(&m, &p, cfg.kappa).unwrap(), cov_reset: false };
        let (g, _) = ukf_update(&pred, y_meas, 0.0025, &cfg, good).unwrap();
        let (b, _) = ukf_update(&pred, y_meas, 0.0025, &cfg, bad).unwrap();
        assert!((g.y + 1.75).abs() < 0.01);
        assert!((b.y + 1.75).abs() > 1.0);
    }

    #[test]
    fn zero_innovation_shrinks_covariance() {
        let map = straight_map();
        let h = |x: &Vector2<f64>| match_lateral([x.x, x.y], 0.0, &map, &MatchConfig::default()).ok().map(|f| f.d_map);
        let cfg = UkfConfig::default();
        let m = Vector2::new(40.0, -1.5);
        let p = Matrix2::new(0.3, 0.05, 0.05, 0.2);
        let pred = Prediction { mean: m, cov: p, sigma: sigma_points(&m, &p, cfg.kappa).unwrap(), cov_reset: false };
        let (mean, cov) = ukf_update(&pred, 1.5, 0.01, &cfg, h).unwrap();
        assert!((mean - m).abs().max() < 1e-12);
        assert!(cov.trace() <= p.trace());
        let diff = SymmetricEigen::new(p - cov).eigenvalues;
        assert!(diff.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn no_match_skips_update() {
        let map = straight_map();
        let h = |x: &Vector2<f64>| match_lateral([x.x, x.y], 0.0, &map, &MatchConfig::default()).ok().map(|f| f.d_map);
        let cfg = UkfConfig::default();
        let m = Vector2::new(40.0, -29.0);
        let p = Matrix2::identity() * 4.0;
        let pred = Prediction { mean: m, cov: p, sigma: sigma_points(&m, &p, cfg.kappa).unwrap(), cov_reset: false };
        assert!(ukf_update(&pred, 1.5, 0.01, &cfg, h).is_none());
    }
}
