//! Trace CSV reading and writing.
//!
//! Columns: `t, gps_x, gps_y, imu_v, imu_omega, imu_theta` are required;
//! `cam_c0..cam_c3` and `truth_x, truth_y, truth_theta` are optional groups.
//! Empty camera cells mark an invalid lane observation. Floats are written
//! in shortest round-trip form, so a written trace parses back bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{fit_lane_cubic, ImuReading, LaneObservation, Pose, SensorFrame, Trace, VehicleState};
use crate::lane_map::LaneMap;

const REQUIRED: [&str; 6] = ["t", "gps_x", "gps_y", "imu_v", "imu_omega", "imu_theta"];
const CAMERA: [&str; 4] = ["cam_c0", "cam_c1", "cam_c2", "cam_c3"];
const TRUTH: [&str; 3] = ["truth_x", "truth_y", "truth_theta"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: timestamp {t} does not increase")]
    NonMonotone { line: u64, t: f64 },
    #[error("trace has no rows")]
    Empty,
}

fn column(headers: &csv::StringRecord, name: &'static str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn group<const N: usize>(headers: &csv::StringRecord, names: [&'static str; N]) -> Result<Option<[usize; N]>, TraceError> {
    let found: Vec<Option<usize>> = names.iter().map(|n| column(headers, n)).collect();
    if found.iter().all(Option::is_none) {
        return Ok(None);
    }
    let mut out = [0; N];
    for (i, f) in found.into_iter().enumerate() {
        out[i] = f.ok_or(TraceError::MissingColumn(names[i]))?;
    }
    Ok(Some(out))
}

/// Parses a trace. Camera columns, when absent, are recomputed from `map`
/// using the truth pose if present, else the GPS fix and IMU heading.
pub fn parse_trace<R: Read>(reader: R, map: &LaneMap, camera_window: f64) -> Result<Trace, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut req = [0usize; 6];
    for (i, name) in REQUIRED.iter().enumerate() {
        req[i] = column(&headers, name).ok_or(TraceError::MissingColumn(name))?;
    }
    let cam = group(&headers, CAMERA)?;
    let truth_cols = group(&headers, TRUTH)?;

    let mut frames = Vec::new();
    let mut truth = truth_cols.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize, name: &str| -> Result<f64, TraceError> {
            let raw = rec.get(idx).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| TraceError::Row { line, message: format!("{name}: cannot parse {raw:?}") })?;
            if !v.is_finite() {
                return Err(TraceError::Row { line, message: format!("{name} is not finite") });
            }
            Ok(v)
        };
        let vals: Vec<f64> = req.iter().zip(REQUIRED).map(|(&i, n)| field(i, n)).collect::<Result<_, _>>()?;
        let t = vals[0];
        if let Some(prev) = frames.last().map(|f: &SensorFrame| f.t) {
            if t <= prev {
                return Err(TraceError::NonMonotone { line, t });
            }
        }
        let imu = ImuReading { v: vals[3], omega: vals[4], heading: vals[5] };
        let pose = match (&truth_cols, &mut truth) {
            (Some(cols), Some(out)) => {
                let p = Pose { x: field(cols[0], TRUTH[0])?, y: field(cols[1], TRUTH[1])?, heading: field(cols[2], TRUTH[2])? };
                out.push(p);
                Some(p)
            }
            _ => None,
        };
        let lane_obs = match cam {
            Some(cols) => {
                if cols.iter().all(|&i| rec.get(i).unwrap_or("").is_empty()) {
                    LaneObservation::INVALID
                } else {
                    LaneObservation {
                        c0: field(cols[0], CAMERA[0])?,
                        c1: field(cols[1], CAMERA[1])?,
                        c2: field(cols[2], CAMERA[2])?,
                        c3: field(cols[3], CAMERA[3])?,
                        valid: true,
                    }
                }
            }
            None => {
                let (x, y, heading) = match pose {
                    Some(p) => (p.x, p.y, p.heading),
                    None => (vals[1], vals[2], imu.heading),
                };
                let st = VehicleState { t, x, y, heading, speed: imu.v, yaw_rate: imu.omega };
                fit_lane_cubic(&st, map, camera_window)
            }
        };
        frames.push(SensorFrame { t, gps: [vals[1], vals[2]], imu, lane_obs });
    }
    if frames.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(Trace { frames, truth })
}

pub fn ingest_csv(path: impl AsRef<Path>, map: &LaneMap, camera_window: f64) -> Result<Trace, TraceError> {
    let file = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(file), map, camera_window)
}

pub fn write_trace<W: Write>(trace: &Trace, writer: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REQUIRED.to_vec();
    header.extend(CAMERA);
    if trace.truth.is_some() {
        header.extend(TRUTH);
    }
    w.write_record(&header)?;
    for (i, f) in trace.frames.iter().enumerate() {
        let mut row: Vec<String> = [f.t, f.gps[0], f.gps[1], f.imu.v, f.imu.omega, f.imu.heading].iter().map(f64::to_string).collect();
        if f.lane_obs.valid {
            let o = f.lane_obs;
            row.extend([o.c0, o.c1, o.c2, o.c3].iter().map(f64::to_string));
        } else {
            row.extend(std::iter::repeat_n(String::new(), 4));
        }
        if let Some(truth) = &trace.truth {
            let p = truth[i];
            row.extend([p.x, p.y, p.heading].iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
