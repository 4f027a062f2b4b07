use std::collections::HashMap;

use super::{LaneSegment, SegmentId};

/// Uniform grid over segment bounding boxes.
///
/// A segment is registered in every cell its bounding box overlaps, so a
/// disc query returns every segment that could intersect the disc (and
/// possibly a few that do not).
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<SegmentId>>,
}

impl GridIndex {
    pub fn build(segments: &[LaneSegment], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<SegmentId>> = HashMap::new();
        for seg in segments {
            let (lo, hi) = seg.bbox();
            let (i0, j0) = cell_of(lo, cell);
            let (i1, j1) = cell_of(hi, cell);
            for i in i0..=i1 {
                for j in j0..=j1 {
                    cells.entry((i, j)).or_default().push(seg.id);
                }
            }
        }
        GridIndex { cell, cells }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn query(&self, center: [f64; 2], radius: f64) -> Vec<SegmentId> {
        let r = radius.max(0.0);
        let (i0, j0) = cell_of([center[0] - r, center[1] - r], self.cell);
        let (i1, j1) = cell_of([center[0] + r, center[1] + r], self.cell);
        let mut out = Vec::new();
        // Far-off queries can span absurd cell ranges; cap the scan by
        // falling back to every populated cell.
        let span = (i1 - i0 + 1).saturating_mul(j1 - j0 + 1);
        if span as usize > self.cells.len() * 4 {
            for ((i, j), ids) in &self.cells {
                if (i0..=i1).contains(i) && (j0..=j1).contains(j) {
                    out.extend_from_slice(ids);
                }
            }
        } else {
            for i in i0..=i1 {
                for j in j0..=j1 {
                    if let Some(ids) = self.cells.get(&(i, j)) {
                        out.extend_from_slice(ids);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn cell_of(p: [f64; 2], cell: f64) -> (i64, i64) {
    ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
}
