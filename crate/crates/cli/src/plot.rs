//! Static SVG rendering of a run log: trajectory overlay, residual,
//! detector score against its threshold, and a mode/attack band.

use std::fmt::Write;

use spoofshield_core::fuse::Mode;
use spoofshield_core::runlog::LogRow;

const WIDTH: f64 = 960.0;
const MARGIN: f64 = 60.0;
const TRAJ_H: f64 = 360.0;
const LINE_H: f64 = 180.0;
const BAND_H: f64 = 40.0;
const GAP: f64 = 40.0;

#[derive(Debug, Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y.0) / (self.y.1 - self.y.0) * self.height
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        x >= self.x.0 && x <= self.x.1 && y >= self.y.0 && y <= self.y.1
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Polyline segments, broken wherever a point is missing or off-frame.
fn polyline(out: &mut String, f: &Frame, pts: impl Iterator<Item = Option<(f64, f64)>>, style: &str) {
    let mut run: Vec<(f64, f64)> = Vec::new();
    let flush = |run: &mut Vec<(f64, f64)>, out: &mut String| {
        if run.len() >= 2 {
            let d: Vec<String> = run.iter().map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y))).collect();
            let _ = writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, d.join(" "));
        }
        run.clear();
    };
    for p in pts {
        match p {
            Some((x, y)) if f.inside(x, y) => run.push((x, y)),
            _ => flush(&mut run, out),
        }
    }
    flush(&mut run, out);
}

fn axes(out: &mut String, f: &Frame, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        f.left, f.top, f.width, f.height
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="14">{title}</text>"#, f.left, f.top - 8.0);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{xlabel}</text>"#,
        f.left + f.width,
        f.top + f.height + 28.0
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{ylabel}</text>"#, 4.0, f.top + 12.0);
    for (v, anchor_y) in [(f.y.0, f.top + f.height), (f.y.1, f.top + 10.0)] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"#, f.left - 4.0, anchor_y);
    }
    for (v, anchor) in [(f.x.0, "start"), (f.x.1, "end")] {
        let x = if anchor == "start" { f.left } else { f.left + f.width };
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="{anchor}">{v:.1}</text>"#, f.top + f.height + 14.0);
    }
}

fn legend(out: &mut String, f: &Frame, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let x = f.left + 10.0 + 130.0 * i as f64;
        let y = f.top + 16.0;
        let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#, x + 20.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{label}</text>"#, x + 24.0, y + 4.0);
    }
}

/// Shaded spans of consecutive rows where `pred` holds.
fn spans(out: &mut String, f: &Frame, rows: &[LogRow], y0: f64, h: f64, color: &str, pred: impl Fn(&LogRow) -> bool) {
    let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
    let mut start: Option<f64> = None;
    for (i, r) in rows.iter().enumerate() {
        let on = pred(r);
        match (on, start) {
            (true, None) => start = Some(r.t),
            (false, Some(s)) => {
                let _ = writeln!(out, r#"<rect x="{:.2}" y="{y0:.1}" width="{:.2}" height="{h:.1}" fill="{color}"/>"#, f.px(s), f.px(rows[i - 1].t + dt) - f.px(s));
                start = None;
            }
            _ => {}
        }
    }
    if let (Some(s), Some(last)) = (start, rows.last()) {
        let _ = writeln!(out, r#"<rect x="{:.2}" y="{y0:.1}" width="{:.2}" height="{h:.1}" fill="{color}"/>"#, f.px(s), f.px(last.t + dt) - f.px(s));
    }
}

pub fn render(rows: &[LogRow], title: &str) -> String {
    let height = MARGIN + TRAJ_H + 2.0 * (GAP + LINE_H) + GAP + BAND_H + MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="24" font-size="16">{}</text>"#, escape(title));
    let inner = WIDTH - 2.0 * MARGIN;

    // Trajectory: bounds from truth and estimate only, so a runaway spoofed
    // GPS track does not squash the plot.
    let anchor = rows.iter().flat_map(|r| [Some(r.est), r.truth]).flatten();
    let xs = range(anchor.clone().map(|p| p[0]));
    let ys = range(anchor.map(|p| p[1]));
    // Equal scaling on both axes.
    let span = (xs.1 - xs.0).max((ys.1 - ys.0) * inner / TRAJ_H);
    let (cx, cy) = (0.5 * (xs.0 + xs.1), 0.5 * (ys.0 + ys.1));
    let half_y = 0.5 * span * TRAJ_H / inner;
    let traj = Frame { left: MARGIN, top: MARGIN, width: inner, height: TRAJ_H, x: (cx - 0.5 * span, cx + 0.5 * span), y: (cy - half_y, cy + half_y) };
    axes(&mut out, &traj, "Trajectory", "x (m)", "y (m)");
    for r in rows.iter().filter(|r| traj.inside(r.gps[0], r.gps[1])) {
        let color = if r.attack { "#d62728" } else { "#ff9896" };
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}"/>"#, traj.px(r.gps[0]), traj.py(r.gps[1]));
    }
    polyline(&mut out, &traj, rows.iter().map(|r| r.truth.map(|p| (p[0], p[1]))), r#"stroke="black" stroke-width="1.5""#);
    polyline(&mut out, &traj, rows.iter().map(|r| Some((r.est[0], r.est[1]))), r##"stroke="#1f77b4" stroke-width="1.5""##);
    legend(&mut out, &traj, &[("truth", "black"), ("estimate", "#1f77b4"), ("GPS", "#d62728")]);

    let t = range(rows.iter().map(|r| r.t));
    let t = (rows.first().map_or(t.0, |r| r.t), rows.last().map_or(t.1, |r| r.t).max(t.0 + 1e-6));

    let top = MARGIN + TRAJ_H + GAP;
    let zr = range(rows.iter().filter_map(|r| r.residual).map(|z| z.clamp(-10.0, 10.0)));
    let res = Frame { left: MARGIN, top, width: inner, height: LINE_H, x: t, y: zr };
    axes(&mut out, &res, "Residual (camera minus map lateral distance)", "t (s)", "z (m)");
    spans(&mut out, &res, rows, top, LINE_H, "#fde0dd", |r| r.attack);
    polyline(&mut out, &res, rows.iter().map(|r| r.residual.map(|z| (r.t, z))), r##"stroke="#2ca02c" stroke-width="1""##);

    let top = top + LINE_H + GAP;
    let thr = rows.iter().filter_map(|r| r.threshold).fold(0.0, f64::max);
    let cap = if thr > 0.0 { 3.0 * thr } else { f64::INFINITY };
    let sr = range(rows.iter().filter_map(|r| r.score).map(|s| s.min(cap)).chain(rows.iter().filter_map(|r| r.threshold)));
    let score = Frame { left: MARGIN, top, width: inner, height: LINE_H, x: t, y: (sr.0.min(0.0), sr.1) };
    axes(&mut out, &score, "Primary detector score and threshold", "t (s)", "score");
    spans(&mut out, &score, rows, top, LINE_H, "#fde0dd", |r| r.attack);
    polyline(&mut out, &score, rows.iter().map(|r| r.score.map(|s| (r.t, s.min(cap)))), r##"stroke="#9467bd" stroke-width="1""##);
    polyline(&mut out, &score, rows.iter().map(|r| r.threshold.map(|h| (r.t, h))), r##"stroke="#d62728" stroke-dasharray="6 3""##);

    let top = top + LINE_H + GAP;
    let band = Frame { left: MARGIN, top, width: inner, height: BAND_H, x: t, y: (0.0, 1.0) };
    axes(&mut out, &band, "Mode (blue: mitigation) and attack (red)", "t (s)", "");
    spans(&mut out, &band, rows, top, BAND_H / 2.0, "#1f77b4", |r| r.mode == Mode::Mitigation);
    spans(&mut out, &band, rows, top + BAND_H / 2.0, BAND_H / 2.0, "#d62728", |r| r.attack);
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
