use serde::{Deserialize, Serialize};

use crate::angle::wrap;
use crate::lane_map::{LaneMap, LaneRecord, MapError};

/// Constant-curvature stretch of road. Positive curvature turns left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadPiece {
    pub length: f64,
    pub curvature: f64,
}

/// Road reference line, starting at the origin heading east.
///
/// The last piece of a sequence continues indefinitely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoadGeometry {
    Straight,
    /// Signed radius: positive turns left.
    Arc { radius: f64 },
    Piecewise { pieces: Vec<RoadPiece> },
}

impl RoadGeometry {
    pub fn pieces(&self) -> Vec<RoadPiece> {
        match self {
            RoadGeometry::Straight => vec![RoadPiece { length: f64::INFINITY, curvature: 0.0 }],
            RoadGeometry::Arc { radius } => vec![RoadPiece { length: f64::INFINITY, curvature: 1.0 / radius }],
            RoadGeometry::Piecewise { pieces } => {
                let mut p = pieces.clone();
                if let Some(last) = p.last_mut() {
                    last.length = f64::INFINITY;
                }
                p
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
}

impl RoadPose {
    /// Point `offset` meters to the left of the reference line.
    pub fn offset(&self, offset: f64) -> [f64; 2] {
        [self.x - offset * self.heading.sin(), self.y + offset * self.heading.cos()]
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    s0: f64,
    length: f64,
    curvature: f64,
    start: RoadPose,
}

/// Reference line with exact closed-form poses along its arc length.
///
/// Arc length is measured from the origin; negative arc lengths extend
/// straight backwards along the initial heading.
#[derive(Debug, Clone)]
pub struct Road {
    placed: Vec<Placed>,
}

fn advance(start: RoadPose, curvature: f64, u: f64) -> RoadPose {
    let h0 = start.heading;
    if curvature.abs() < 1e-12 {
        RoadPose { x: start.x + u * h0.cos(), y: start.y + u * h0.sin(), heading: h0, curvature }
    } else {
        let h = h0 + curvature * u;
        RoadPose {
            x: start.x + (h.sin() - h0.sin()) / curvature,
            y: start.y - (h.cos() - h0.cos()) / curvature,
            heading: wrap(h),
            curvature,
        }
    }
}

impl Road {
    pub fn new(geometry: &RoadGeometry) -> Self {
        let mut placed = Vec::new();
        let mut pose = RoadPose { x: 0.0, y: 0.0, heading: 0.0, curvature: 0.0 };
        let mut s0 = 0.0;
        for piece in geometry.pieces() {
            let p = Placed { s0, length: piece.length, curvature: piece.curvature, start: RoadPose { curvature: piece.curvature, ..pose } };
            placed.push(p);
            if piece.length.is_finite() {
                pose = advance(p.start, piece.curvature, piece.length);
                s0 += piece.length;
            }
        }
        Road { placed }
    }

    pub fn pose_at(&self, s: f64) -> RoadPose {
        if s < 0.0 {
            return RoadPose { x: s, y: 0.0, heading: 0.0, curvature: 0.0 };
        }
        let p = self
            .placed
            .iter()
            .find(|p| s < p.s0 + p.length)
            .unwrap_or_else(|| self.placed.last().expect("road has at least one piece"));
        advance(p.start, p.curvature, s - p.s0)
    }

    /// Reference arc length reached after a vehicle driving `offset` to the
    /// left of the line has covered `distance` meters of its own path.
    pub fn ref_length_for(&self, distance: f64, offset: f64) -> f64 {
        let mut remaining = distance;
        for p in &self.placed {
            let scale = 1.0 - offset * p.curvature;
            let path_len = p.length * scale;
            if remaining <= path_len {
                return p.s0 + remaining / scale;
            }
            remaining -= path_len;
        }
        unreachable!("last road piece is unbounded")
    }

    pub fn curvatures(&self) -> impl Iterator<Item = f64> + '_ {
        self.placed.iter().map(|p| p.curvature)
    }

    /// Samples the reference line every `spacing` meters on `[s_min, s_max]`.
    pub fn sample(&self, s_min: f64, s_max: f64, spacing: f64) -> Vec<[f64; 2]> {
        let n = ((s_max - s_min) / spacing).ceil() as usize;
        (0..=n)
            .map(|i| {
                let p = self.pose_at(s_min + i as f64 * spacing);
                [p.x, p.y]
            })
            .collect()
    }

    pub fn build_map(&self, s_min: f64, s_max: f64, spacing: f64) -> Result<LaneMap, MapError> {
        LaneMap::build(vec![LaneRecord { lane_id: "ego".into(), points: self.sample(s_min, s_max, spacing) }], spacing)
    }
}
