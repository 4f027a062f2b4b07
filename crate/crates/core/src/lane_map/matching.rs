use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LaneMap, LaneSegment, SegmentId};
use crate::angle::wrap;
use crate::LEFT_IS_POSITIVE;

/// Orthogonal projection of a point onto a segment's supporting line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub foot: [f64; 2],
    pub distance: f64,
    /// The foot lies between the endpoints (bounds checked on the segment's
    /// dominant axis: x normally, y for steep and vertical segments).
    pub on_segment: bool,
    pub segment: SegmentId,
}

/// Projects `point` onto `segment`.
///
/// Vector form of the slope-intercept construction: the foot is
/// `start + t (end - start)` with `t` from the dot product, which needs no
/// special case for vertical segments.
pub fn project(point: [f64; 2], segment: &LaneSegment) -> Projection {
    let [dx, dy] = segment.direction();
    let (ax, ay) = (segment.start.x, segment.start.y);
    let t = ((point[0] - ax) * dx + (point[1] - ay) * dy) / (dx * dx + dy * dy);
    let mut foot = [ax + t * dx, ay + t * dy];
    let (lo, hi) = segment.bbox();
    let on_segment = if dx.abs() >= dy.abs() {
        foot[0] >= lo[0] && foot[0] <= hi[0]
    } else {
        foot[1] >= lo[1] && foot[1] <= hi[1]
    };
    if on_segment {
        foot[0] = foot[0].clamp(lo[0], hi[0]);
        foot[1] = foot[1].clamp(lo[1], hi[1]);
    }
    Projection {
        foot,
        distance: (point[0] - foot[0]).hypot(point[1] - foot[1]),
        on_segment,
        segment: segment.id,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Only segments within this distance of the query are considered.
    pub search_radius: f64,
    /// Fixes with `|theta1 - theta2|` at or beyond this are rejected.
    pub heading_cap: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { search_radius: 30.0, heading_cap: 60f64.to_radians() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MatchError {
    #[error("no lane segment within the search radius")]
    NoMatch,
    #[error("heading offset {heading_diff:.4} rad to the matched segment is too large (d0 = {d0:.4} m)")]
    HeadingSingular { d0: f64, heading_diff: f64 },
}

/// Closest admissible foot on the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub d0: f64,
    pub foot: [f64; 2],
    pub segment: SegmentId,
}

/// Map-matched lateral distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LateralFix {
    /// Perpendicular distance to the matched segment.
    pub d0: f64,
    /// Heading-corrected lateral distance, positive when the lane is to
    /// the vehicle's left.
    pub d_map: f64,
    pub segment: SegmentId,
    /// `theta1 - theta2`, wrapped.
    pub heading_diff: f64,
    pub foot: [f64; 2],
}

impl LaneMap {
    /// Closest on-segment foot within `radius`.
    ///
    /// A query past the shared vertex of two consecutive segments (outside
    /// of a bend) has no on-segment foot on either; the vertex itself is
    /// then the admissible foot. Open lane ends are never admissible.
    /// Equal distances are resolved towards the segment whose heading is
    /// closest to `heading_hint`, then by lower segment id.
    pub fn nearest(&self, point: [f64; 2], radius: f64, heading_hint: Option<f64>) -> Option<Nearest> {
        const TIE: f64 = 1e-12;
        let mut best: Option<Nearest> = None;
        for id in self.candidates(point, radius) {
            let seg = self.segment(id);
            let proj = project(point, seg);
            let (d, foot) = if proj.on_segment {
                (proj.distance, proj.foot)
            } else {
                let [dx, dy] = seg.direction();
                let t = (point[0] - seg.start.x) * dx + (point[1] - seg.start.y) * dy;
                let past_end = t > 0.0;
                let joint = if past_end { seg.joined_at_end.then_some(seg.end) } else { seg.joined_at_start.then_some(seg.start) };
                match joint {
                    Some(v) => ((point[0] - v.x).hypot(point[1] - v.y), [v.x, v.y]),
                    None => continue,
                }
            };
            if d > radius {
                continue;
            }
            let cand = Nearest { d0: d, foot, segment: id };
            best = match best {
                None => Some(cand),
                Some(b) if d < b.d0 - TIE => Some(cand),
                Some(b) if (d - b.d0).abs() <= TIE => {
                    let better = match heading_hint {
                        Some(h) => {
                            let dc = wrap(seg.heading - h).abs();
                            let db = wrap(self.segment(b.segment).heading - h).abs();
                            dc < db
                        }
                        None => false,
                    };
                    if better {
                        Some(cand)
                    } else {
                        Some(b)
                    }
                }
                keep => keep,
            };
        }
        best
    }
}

/// Lateral distance from a position estimate to the nearest lane.
///
/// `d0` is the perpendicular distance to the closest segment within the
/// search radius; `d_map = d0 / cos(theta1 - theta2)` carries the sign of
/// the lane side (left positive).
pub fn match_lateral(point: [f64; 2], heading: f64, map: &LaneMap, cfg: &MatchConfig) -> Result<LateralFix, MatchError> {
    let near = map.nearest(point, cfg.search_radius, Some(heading)).ok_or(MatchError::NoMatch)?;
    let seg = map.segment(near.segment);
    let heading_diff = wrap(seg.heading - heading);
    if heading_diff.abs() >= cfg.heading_cap {
        return Err(MatchError::HeadingSingular { d0: near.d0, heading_diff });
    }
    let [dx, dy] = seg.direction();
    // cross(direction, vehicle - foot) > 0 puts the vehicle left of the
    // lane, i.e. the lane to the vehicle's right.
    let cross = dx * (point[1] - near.foot[1]) - dy * (point[0] - near.foot[0]);
    let side = if cross > 0.0 { -1.0 } else { 1.0 };
    let d_map = if near.d0 == 0.0 { 0.0 } else { LEFT_IS_POSITIVE * side * near.d0 / heading_diff.cos() };
    Ok(LateralFix { d0: near.d0, d_map, segment: near.segment, heading_diff, foot: near.foot })
}
