//! GPS spoofing models: constant bias and exponentially growing stealth
//! bias, applied to the GPS channel of a frame stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SensorFrame;

/// Ticks closer than this to a window edge count as inside it.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("invalid attack: {0}")]
    Invalid(String),
    #[error("attack window [{t_start}, {t_end}] is outside the trace span [{span_start}, {span_end}]")]
    OutsideTrace { t_start: f64, t_end: f64, span_start: f64, span_end: f64 },
    #[error("attack windows [{0}, {1}] and [{2}, {3}] overlap")]
    Overlap(f64, f64, f64, f64),
    #[error("infeasible attack ranges: {0}")]
    Infeasible(String),
}

/// Frame in which a constant bias vector is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasFrame {
    #[default]
    World,
    /// `(along-track, left)` relative to the vehicle heading at onset.
    Vehicle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedDirection {
    /// Perpendicular to the heading at onset, pointing left.
    Lateral,
    /// Along the heading at onset.
    Longitudinal,
}

/// Direction of a stealth bias: named relative to the heading at onset, or
/// a fixed world-frame vector (normalized on use).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Direction {
    Named(NamedDirection),
    World([f64; 2]),
}

impl Default for Direction {
    fn default() -> Self {
        Direction::Named(NamedDirection::Lateral)
    }
}

impl Direction {
    fn resolve(&self, heading: f64) -> [f64; 2] {
        let (s, c) = heading.sin_cos();
        match self {
            Direction::Named(NamedDirection::Lateral) => [-s, c],
            Direction::Named(NamedDirection::Longitudinal) => [c, s],
            Direction::World([x, y]) => {
                let n = x.hypot(*y);
                [x / n, y / n]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    None,
    ConstantBias {
        bias: [f64; 2],
        #[serde(default)]
        frame: BiasFrame,
    },
    /// Offset `gamma * delta^k` along `direction`, `k` counting ticks from
    /// onset.
    Stealth {
        gamma: f64,
        delta: f64,
        #[serde(default)]
        direction: Direction,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default)]
    pub t_end: f64,
}

impl AttackSpec {
    pub const NONE: AttackSpec = AttackSpec { kind: AttackKind::None, t_start: 0.0, t_end: 0.0 };

    pub fn constant(bias: [f64; 2], t_start: f64, t_end: f64) -> Self {
        AttackSpec { kind: AttackKind::ConstantBias { bias, frame: BiasFrame::World }, t_start, t_end }
    }

    pub fn stealth(gamma: f64, delta: f64, direction: Direction, t_start: f64, t_end: f64) -> Self {
        AttackSpec { kind: AttackKind::Stealth { gamma, delta, direction }, t_start, t_end }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, AttackKind::None)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Invalid(m.to_string()));
        if self.is_none() {
            return Ok(());
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_start < self.t_end) {
            return bad("window needs finite t_start < t_end");
        }
        match self.kind {
            AttackKind::ConstantBias { bias, .. } if !bias.iter().all(|b| b.is_finite()) => bad("bias must be finite"),
            AttackKind::Stealth { gamma, delta, direction } => {
                if !(gamma.is_finite() && gamma >= 0.0) {
                    return bad("gamma must be finite and >= 0");
                }
                if !(delta.is_finite() && delta > 1.0) {
                    return bad("delta must be > 1");
                }
                if let Direction::World([x, y]) = direction {
                    if !(x.hypot(y).is_finite() && x.hypot(y) > 0.0) {
                        return bad("direction must be a finite nonzero vector");
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        !self.is_none() && t >= self.t_start - TIME_EPS && t <= self.t_end + TIME_EPS
    }

    /// Offset added to the GPS fix `k` ticks after onset, given the heading
    /// at onset.
    pub fn offset(&self, k: usize, heading_at_onset: f64) -> [f64; 2] {
        match self.kind {
            AttackKind::None => [0.0, 0.0],
            AttackKind::ConstantBias { bias, frame: BiasFrame::World } => bias,
            AttackKind::ConstantBias { bias, frame: BiasFrame::Vehicle } => {
                let (s, c) = heading_at_onset.sin_cos();
                [c * bias[0] - s * bias[1], s * bias[0] + c * bias[1]]
            }
            AttackKind::Stealth { gamma, delta, direction } => {
                let m = gamma * delta.powi(k as i32);
                let d = direction.resolve(heading_at_onset);
                [m * d[0], m * d[1]]
            }
        }
    }
}

/// Applies one attack. Returns the attacked frames and the per-tick mask.
pub fn apply(frames: &[SensorFrame], spec: &AttackSpec) -> Result<(Vec<SensorFrame>, Vec<bool>), AttackError> {
    AttackSchedule::new(vec![*spec])?.apply(frames)
}

/// Non-overlapping attacks over one trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<AttackSpec>", into = "Vec<AttackSpec>")]
pub struct AttackSchedule {
    specs: Vec<AttackSpec>,
}

impl TryFrom<Vec<AttackSpec>> for AttackSchedule {
    type Error = AttackError;

    fn try_from(specs: Vec<AttackSpec>) -> Result<Self, AttackError> {
        AttackSchedule::new(specs)
    }
}

impl From<AttackSchedule> for Vec<AttackSpec> {
    fn from(s: AttackSchedule) -> Self {
        s.specs
    }
}

impl AttackSchedule {
    pub fn new(specs: Vec<AttackSpec>) -> Result<Self, AttackError> {
        for s in &specs {
            s.validate()?;
        }
        let mut active: Vec<AttackSpec> = specs.into_iter().filter(|s| !s.is_none()).collect();
        active.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        for w in active.windows(2) {
            if w[1].t_start <= w[0].t_end + TIME_EPS {
                return Err(AttackError::Overlap(w[0].t_start, w[0].t_end, w[1].t_start, w[1].t_end));
            }
        }
        Ok(AttackSchedule { specs: active })
    }

    pub fn specs(&self) -> &[AttackSpec] {
        &self.specs
    }

    pub fn mask(&self, times: impl IntoIterator<Item = f64>) -> Vec<bool> {
        times.into_iter().map(|t| self.specs.iter().any(|s| s.contains(t))).collect()
    }

    pub fn apply(&self, frames: &[SensorFrame]) -> Result<(Vec<SensorFrame>, Vec<bool>), AttackError> {
        let mut out = frames.to_vec();
        let mut mask = vec![false; frames.len()];
        if self.specs.is_empty() {
            return Ok((out, mask));
        }
        let (span_start, span_end) = match (frames.first(), frames.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (f64::NAN, f64::NAN),
        };
        for spec in &self.specs {
            if !(spec.t_start >= span_start - TIME_EPS && spec.t_end <= span_end + TIME_EPS) {
                return Err(AttackError::OutsideTrace { t_start: spec.t_start, t_end: spec.t_end, span_start, span_end });
            }
            let Some(onset) = frames.iter().position(|f| spec.contains(f.t)) else {
                continue;
            };
            let heading = frames[onset].imu.heading;
            for (i, f) in out.iter_mut().enumerate().skip(onset) {
                if !spec.contains(f.t) {
                    break;
                }
                let [dx, dy] = spec.offset(i - onset, heading);
                f.gps[0] += dx;
                f.gps[1] += dy;
                mask[i] = true;
            }
        }
        Ok((out, mask))
    }
}

/// Sampling ranges for [`randomize`], each `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRanges {
    pub start: [f64; 2],
    pub duration: [f64; 2],
    /// Constant bias magnitude, applied to a random side of the vehicle.
    pub bias: [f64; 2],
    pub gamma: [f64; 2],
    pub delta: [f64; 2],
}

impl Default for AttackRanges {
    fn default() -> Self {
        AttackRanges { start: [10.0, 20.0], duration: [30.0, 50.0], bias: [2.0, 2.0], gamma: [0.02, 0.02], delta: [1.05, 1.05] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKindName {
    None,
    ConstantBias,
    Stealth,
}

/// Draws an attack uniformly within `ranges`, deterministic in `seed`.
pub fn randomize(seed: u64, duration: f64, kind: AttackKindName, ranges: &AttackRanges) -> Result<AttackSpec, AttackError> {
    let infeasible = |m: String| Err(AttackError::Infeasible(m));
    let named = [("start", ranges.start), ("duration", ranges.duration), ("bias", ranges.bias), ("gamma", ranges.gamma), ("delta", ranges.delta)];
    for (name, [lo, hi]) in named {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return infeasible(format!("{name} range [{lo}, {hi}]"));
        }
    }
    if kind == AttackKindName::None {
        return Ok(AttackSpec::NONE);
    }
    if ranges.start[0] < 0.0 || ranges.duration[0] <= 0.0 {
        return infeasible("start must be >= 0 and duration > 0".into());
    }
    if ranges.start[1] + ranges.duration[1] > duration {
        return infeasible(format!(
            "latest end {} exceeds scenario duration {duration}",
            ranges.start[1] + ranges.duration[1]
        ));
    }
    if kind == AttackKindName::Stealth && (ranges.delta[0] <= 1.0 || ranges.gamma[0] < 0.0) {
        return infeasible("stealth needs delta > 1 and gamma >= 0".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_start = rng.random_range(ranges.start[0]..=ranges.start[1]);
    let len = rng.random_range(ranges.duration[0]..=ranges.duration[1]);
    let kind = match kind {
        AttackKindName::ConstantBias => {
            let m = rng.random_range(ranges.bias[0]..=ranges.bias[1]);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            AttackKind::ConstantBias { bias: [0.0, side * m], frame: BiasFrame::Vehicle }
        }
        AttackKindName::Stealth => AttackKind::Stealth {
            gamma: rng.random_range(ranges.gamma[0]..=ranges.gamma[1]),
            delta: rng.random_range(ranges.delta[0]..=ranges.delta[1]),
            direction: Direction::default(),
        },
        AttackKindName::None => unreachable!(),
    };
    Ok(AttackSpec { kind, t_start, t_end: t_start + len })
}
