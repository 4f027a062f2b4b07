//! Polyline HD map and lateral map matching.
//!
//! A map is a set of lanes, each an ordered sequence of sampled reference
//! points. Consecutive points form [`LaneSegment`]s, which are bucketed in a
//! uniform grid so that matching only looks at segments near the query.

mod index;
mod matching;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::GridIndex;
pub use matching::{match_lateral, project, LateralFix, MatchConfig, MatchError, Nearest, Projection};

/// Minimum separation between consecutive points of one lane.
pub const MIN_POINT_SEPARATION: f64 = 1e-9;

/// Grid cell edge used by [`LaneMap`]'s spatial index, in meters.
pub const DEFAULT_CELL_SIZE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map has no lanes")]
    Empty,
    #[error("lane {lane:?} has {count} point(s); at least 2 are required")]
    TooFewPoints { lane: String, count: usize },
    #[error("lane {lane:?}: points {index} and {next} coincide", next = .index + 1)]
    DuplicatePoint { lane: String, index: usize },
    #[error("lane {lane:?}: point {index} is not finite")]
    NonFinite { lane: String, index: usize },
    #[error("sampling spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("map file: {0}")]
    Io(#[from] std::io::Error),
    #[error("map json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LaneIdx(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePoint {
    pub x: f64,
    pub y: f64,
    pub lane: LaneIdx,
}

impl LanePoint {
    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Slope-intercept form `y = k x + b` of a segment's supporting line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Line {
    Sloped { k: f64, b: f64 },
    Vertical { x: f64 },
}

impl Line {
    /// Perpendicular to this line through `(px, py)`.
    pub fn perpendicular_through(&self, px: f64, py: f64) -> Line {
        match *self {
            Line::Sloped { k: 0.0, .. } => Line::Vertical { x: px },
            Line::Sloped { k, .. } => {
                let k1 = -1.0 / k;
                Line::Sloped { k: k1, b: py - k1 * px }
            }
            Line::Vertical { .. } => Line::Sloped { k: 0.0, b: py },
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaneSegment {
    pub id: SegmentId,
    pub start: LanePoint,
    pub end: LanePoint,
    pub line: Line,
    /// Direction of travel from `start` to `end`, in `(-pi, pi]`.
    pub heading: f64,
    /// Position of `start` within its lane.
    pub index_in_lane: usize,
    /// Whether `start` / `end` are shared with a neighbouring segment.
    pub joined_at_start: bool,
    pub joined_at_end: bool,
}

impl LaneSegment {
    fn new(id: SegmentId, start: LanePoint, end: LanePoint, index_in_lane: usize, lane_len: usize) -> Self {
        let dx = end.x - start.x;
        let dy = end.y - start.y;
        // A segment counts as vertical once its x extent is lost in rounding.
        let line = if dx.abs() <= 1e-12 * dy.abs() {
            Line::Vertical { x: start.x }
        } else {
            let k = dy / dx;
            Line::Sloped { k, b: start.y - k * start.x }
        };
        LaneSegment {
            id,
            start,
            end,
            line,
            heading: crate::angle::wrap(dy.atan2(dx)),
            index_in_lane,
            joined_at_start: index_in_lane > 0,
            joined_at_end: index_in_lane + 2 < lane_len,
        }
    }

    pub fn lane(&self) -> LaneIdx {
        self.start.lane
    }

    pub fn direction(&self) -> [f64; 2] {
        [self.end.x - self.start.x, self.end.y - self.start.y]
    }

    pub fn length(&self) -> f64 {
        let [dx, dy] = self.direction();
        dx.hypot(dy)
    }

    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        (
            [self.start.x.min(self.end.x), self.start.y.min(self.end.y)],
            [self.start.x.max(self.end.x), self.start.y.max(self.end.y)],
        )
    }

    pub fn project(&self, point: [f64; 2]) -> Projection {
        project(point, self)
    }
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub name: String,
    pub points: Vec<LanePoint>,
}

/// Immutable polyline map. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct LaneMap {
    lanes: Vec<Lane>,
    segments: Vec<LaneSegment>,
    index: GridIndex,
    sampling_spacing: f64,
}

/// One lane as stored in a map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub lane_id: String,
    pub points: Vec<[f64; 2]>,
}

impl LaneMap {
    /// Builds the map from named lanes, validating every lane.
    pub fn build(lanes: Vec<LaneRecord>, spacing: f64) -> Result<Self, MapError> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(MapError::BadSpacing(spacing));
        }
        if lanes.is_empty() {
            return Err(MapError::Empty);
        }
        let mut out_lanes = Vec::with_capacity(lanes.len());
        let mut segments = Vec::new();
        for (li, rec) in lanes.into_iter().enumerate() {
            validate_lane(&rec)?;
            let lane = LaneIdx(li);
            let points: Vec<LanePoint> = rec
                .points
                .iter()
                .map(|&[x, y]| LanePoint { x, y, lane })
                .collect();
            for (i, pair) in points.windows(2).enumerate() {
                let id = SegmentId(segments.len());
                segments.push(LaneSegment::new(id, pair[0], pair[1], i, points.len()));
            }
            out_lanes.push(Lane { name: rec.lane_id, points });
        }
        let index = GridIndex::build(&segments, DEFAULT_CELL_SIZE);
        Ok(LaneMap { lanes: out_lanes, segments, index, sampling_spacing: spacing })
    }

    pub fn from_json_str(text: &str) -> Result<Self, MapError> {
        let lanes: Vec<LaneRecord> = serde_json::from_str(text)?;
        let spacing = median_spacing(&lanes).unwrap_or(1.0);
        Self::build(lanes, spacing)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_records(&self) -> Vec<LaneRecord> {
        self.lanes
            .iter()
            .map(|l| LaneRecord { lane_id: l.name.clone(), points: l.points.iter().map(LanePoint::xy).collect() })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_records()).expect("map records always serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn segments(&self) -> &[LaneSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &LaneSegment {
        &self.segments[id.0]
    }

    pub fn index(&self) -> &GridIndex {
        &self.index
    }

    pub fn sampling_spacing(&self) -> f64 {
        self.sampling_spacing
    }

    /// Segment ids whose bounding boxes touch a grid cell overlapping the
    /// disc, sorted and deduplicated.
    pub fn candidates(&self, center: [f64; 2], radius: f64) -> Vec<SegmentId> {
        self.index.query(center, radius)
    }
}

fn validate_lane(rec: &LaneRecord) -> Result<(), MapError> {
    if rec.points.len() < 2 {
        return Err(MapError::TooFewPoints { lane: rec.lane_id.clone(), count: rec.points.len() });
    }
    for (i, p) in rec.points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(MapError::NonFinite { lane: rec.lane_id.clone(), index: i });
        }
    }
    for (i, w) in rec.points.windows(2).enumerate() {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        if d <= MIN_POINT_SEPARATION {
            return Err(MapError::DuplicatePoint { lane: rec.lane_id.clone(), index: i });
        }
    }
    Ok(())
}

fn median_spacing(lanes: &[LaneRecord]) -> Option<f64> {
    let mut d: Vec<f64> = lanes
        .iter()
        .flat_map(|l| l.points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])))
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane(name: &str, pts: &[[f64; 2]]) -> LaneRecord {
        LaneRecord { lane_id: name.into(), points: pts.to_vec() }
    }

    #[test]
    fn straight_lane_segments() {
        let map = LaneMap::build(vec![lane("a", &[[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])], 10.0).unwrap();
        assert_eq!(map.segments().len(), 2);
        for s in map.segments() {
            assert_eq!(s.heading, 0.0);
            assert_eq!(s.line, Line::Sloped { k: 0.0, b: 0.0 });
        }
        assert!(!map.segments()[0].joined_at_start);
        assert!(map.segments()[0].joined_at_end);
        assert!(map.segments()[1].joined_at_start);
        assert!(!map.segments()[1].joined_at_end);
    }

    #[test]
    fn degenerate_lanes_rejected() {
        assert!(matches!(
            LaneMap::build(vec![lane("a", &[[1.0, 1.0]])], 1.0),
            Err(MapError::TooFewPoints { count: 1, .. })
        ));
        assert!(matches!(
            LaneMap::build(vec![lane("a", &[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])], 1.0),
            Err(MapError::DuplicatePoint { index: 0, .. })
        ));
        assert!(matches!(
            LaneMap::build(vec![lane("a", &[[0.0, 0.0], [f64::NAN, 0.0]])], 1.0),
            Err(MapError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(LaneMap::build(vec![], 1.0), Err(MapError::Empty)));
    }

    #[test]
    fn circle_headings_follow_tangent() {
        // Chord i of a circle sampled every `ds` of arc has heading
        // (i + 1/2) * ds / r + pi/2.
        let r = 25.0;
        let ds = 1.0;
        let n = 60;
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let a = i as f64 * ds / r;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let map = LaneMap::build(vec![lane("c", &pts)], ds).unwrap();
        for (i, s) in map.segments().iter().enumerate() {
            let expected = crate::angle::wrap((i as f64 + 0.5) * ds / r + std::f64::consts::FRAC_PI_2);
            assert!((crate::angle::wrap(s.heading - expected)).abs() < 1e-12, "segment {i}");
        }
        for w in map.segments().windows(2) {
            let step = crate::angle::wrap(w[1].heading - w[0].heading);
            assert!((step - ds / r).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_segment_flagged() {
        let map = LaneMap::build(vec![lane("v", &[[3.0, 0.0], [3.0, 10.0]])], 10.0).unwrap();
        assert_eq!(map.segments()[0].line, Line::Vertical { x: 3.0 });
        assert!((map.segments()[0].heading - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let text = r#"[{"lane_id": "L1", "points": [[0, 0], [1.5, 0.25], [3, 1]]},
                       {"lane_id": "L2", "points": [[0, 3.5], [3, 3.5]]}]"#;
        let map = LaneMap::from_json_str(text).unwrap();
        assert_eq!(map.lanes().len(), 2);
        assert_eq!(map.segments().len(), 3);
        let again = LaneMap::from_json_str(&map.to_json()).unwrap();
        assert_eq!(again.to_records(), map.to_records());
    }

    #[test]
    fn bad_json_rejected() {
        assert!(matches!(LaneMap::from_json_str("{\"lanes\": 3}"), Err(MapError::Json(_))));
        assert!(matches!(
            LaneMap::from_json_str(r#"[{"lane_id": "x", "points": [[0, 0]]}]"#),
            Err(MapError::TooFewPoints { .. })
        ));
    }
}
