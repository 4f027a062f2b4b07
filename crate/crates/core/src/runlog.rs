//! Per-tick run log as CSV.
//!
//! Columns: `t, mode, alarm, score, threshold, est_x, est_y, truth_x,
//! truth_y, gps_x, gps_y, d_cam, d_map, residual, attack`, then
//! `<detector>_alarm, <detector>_score` for every detector that ran.
//! Missing values are empty cells; booleans are `0`/`1`.

use std::io::{Read, Write};

use thiserror::Error;

use crate::detect::DetectorKind;
use crate::fuse::{Mode, TickRecord};
use crate::sim::{Pose, SensorFrame};

const BASE: [&str; 15] = [
    "t", "mode", "alarm", "score", "threshold", "est_x", "est_y", "truth_x", "truth_y", "gps_x", "gps_y", "d_cam", "d_map",
    "residual", "attack",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("log is missing column {0:?}")]
    MissingColumn(String),
    #[error("log line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("log has no rows")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorCell {
    pub kind: DetectorKind,
    pub alarm: bool,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub mode: Mode,
    pub alarm: bool,
    pub score: Option<f64>,
    pub threshold: Option<f64>,
    pub est: [f64; 2],
    pub truth: Option<[f64; 2]>,
    pub gps: [f64; 2],
    pub d_cam: Option<f64>,
    pub d_map: Option<f64>,
    pub residual: Option<f64>,
    pub attack: bool,
    pub detectors: Vec<DetectorCell>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Joins supervisor output with its inputs into log rows.
pub fn log_rows(records: &[TickRecord], frames: &[SensorFrame], truth: Option<&[Pose]>, mask: &[bool]) -> Vec<LogRow> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| LogRow {
            t: r.t,
            mode: r.mode,
            alarm: r.alarm,
            score: r.score,
            threshold: finite(r.threshold),
            est: r.belief.position(),
            truth: truth.map(|p| [p[i].x, p[i].y]),
            gps: frames[i].gps,
            d_cam: finite(r.residual.d_cam),
            d_map: finite(r.residual.d_map),
            residual: r.residual.value(),
            attack: mask.get(i).copied().unwrap_or(false),
            detectors: r.verdicts.iter().map(|(k, v)| DetectorCell { kind: *k, alarm: v.alarm, score: v.score }).collect(),
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_log<W: Write>(rows: &[LogRow], writer: W) -> Result<(), LogError> {
    let mut w = csv::Writer::from_writer(writer);
    let kinds: Vec<DetectorKind> = rows.first().map(|r| r.detectors.iter().map(|d| d.kind).collect()).unwrap_or_default();
    let mut header: Vec<String> = BASE.iter().map(|s| s.to_string()).collect();
    for k in &kinds {
        header.push(format!("{}_alarm", k.name()));
        header.push(format!("{}_score", k.name()));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            r.mode.name().to_string(),
            flag(r.alarm).to_string(),
            cell(r.score),
            cell(r.threshold),
            r.est[0].to_string(),
            r.est[1].to_string(),
            cell(r.truth.map(|p| p[0])),
            cell(r.truth.map(|p| p[1])),
            r.gps[0].to_string(),
            r.gps[1].to_string(),
            cell(r.d_cam),
            cell(r.d_map),
            cell(r.residual),
            flag(r.attack).to_string(),
        ];
        for d in &r.detectors {
            rec.push(flag(d.alarm).to_string());
            rec.push(cell(d.score));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<R: Read>(reader: R) -> Result<Vec<LogRow>, LogError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| LogError::MissingColumn(name.to_string()));
    let idx: Vec<usize> = BASE.iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let kinds: Vec<(DetectorKind, usize, usize)> = DetectorKind::ALL
        .iter()
        .filter_map(|&k| {
            let a = headers.iter().position(|h| h == format!("{}_alarm", k.name()))?;
            let s = headers.iter().position(|h| h == format!("{}_score", k.name()))?;
            Some((k, a, s))
        })
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let err = |message: String| LogError::Row { line, message };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let opt = |i: usize, name: &str| -> Result<Option<f64>, LogError> {
            let raw = get(i);
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>().map(Some).map_err(|_| err(format!("{name}: cannot parse {raw:?}")))
        };
        let req = |i: usize, name: &str| -> Result<f64, LogError> {
            opt(i, name)?.filter(|v| v.is_finite()).ok_or_else(|| err(format!("{name} is required and finite")))
        };
        let boolean = |i: usize, name: &str| -> Result<bool, LogError> {
            match get(i) {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(err(format!("{name}: expected 0 or 1, got {other:?}"))),
            }
        };
        let mode = match get(idx[1]) {
            "normal" => Mode::Normal,
            "mitigation" => Mode::Mitigation,
            other => return Err(err(format!("mode: unknown {other:?}"))),
        };
        let truth = match (opt(idx[7], "truth_x")?, opt(idx[8], "truth_y")?) {
            (Some(x), Some(y)) => Some([x, y]),
            (None, None) => None,
            _ => return Err(err("truth_x and truth_y must both be present or both empty".into())),
        };
        let detectors = kinds
            .iter()
            .map(|&(kind, a, s)| Ok(DetectorCell { kind, alarm: boolean(a, "detector alarm")?, score: opt(s, "detector score")? }))
            .collect::<Result<Vec<_>, LogError>>()?;
        rows.push(LogRow {
            t: req(idx[0], "t")?,
            mode,
            alarm: boolean(idx[2], "alarm")?,
            score: opt(idx[3], "score")?,
            threshold: opt(idx[4], "threshold")?,
            est: [req(idx[5], "est_x")?, req(idx[6], "est_y")?],
            truth,
            gps: [opt(idx[9], "gps_x")?.unwrap_or(f64::NAN), opt(idx[10], "gps_y")?.unwrap_or(f64::NAN)],
            d_cam: opt(idx[11], "d_cam")?,
            d_map: opt(idx[12], "d_map")?,
            residual: opt(idx[13], "residual")?,
            attack: boolean(idx[14], "attack")?,
            detectors,
        });
    }
    if rows.is_empty() {
        return Err(LogError::Empty);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64) -> LogRow {
        LogRow {
            t,
            mode: if t > 0.1 { Mode::Mitigation } else { Mode::Normal },
            alarm: t > 0.1,
            score: Some(0.25 * t),
            threshold: Some(3.1),
            est: [t * 10.0, -1.75],
            truth: Some([t * 10.0 + 1e-3, -1.75]),
            gps: [t * 10.0, 0.1 / 3.0],
            d_cam: Some(1.75),
            d_map: None,
            residual: None,
            attack: t > 0.05,
            detectors: vec![
                DetectorCell { kind: DetectorKind::Lstm, alarm: true, score: Some(2.0) },
                DetectorCell { kind: DetectorKind::Cusum, alarm: false, score: None },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let rows: Vec<LogRow> = (0..4).map(|k| row(k as f64 * 0.1)).collect();
        let mut buf = Vec::new();
        write_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,mode,alarm,score,threshold,est_x,est_y,truth_x,truth_y,gps_x,gps_y,d_cam,d_map,residual,attack,lstm_alarm,lstm_score,cusum_alarm,cusum_score\n"));
        assert_eq!(read_log(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn malformed_rejected() {
        let mut buf = Vec::new();
        write_log(&[row(0.0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(",normal,", ",sideways,");
        assert!(matches!(read_log(text.as_bytes()), Err(LogError::Row { line: 2, .. })));
        assert!(matches!(read_log("t,mode\n0,normal\n".as_bytes()), Err(LogError::MissingColumn(_))));
    }
}
