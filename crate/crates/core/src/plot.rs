//! Minimal SVG line and bar charts for run logs, filter comparisons and
//! planner reports.
//!
//! Every series element carries its raw values in `data-x` / `data-values`
//! attributes so a plot can be checked against the numbers it was drawn
//! from.

use crate::baselines::{ComparisonReport, PlannerKind};
use crate::experiments::ErrorCurves;
use crate::sim::RunLog;
use std::fmt::Write;

const PALETTE: [&str; 6] = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            x,
            y,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

/// One panel of line series sharing axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Keep x and y scales equal (trajectory projections).
    pub equal_axes: bool,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            equal_axes: false,
        }
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 50.0;

fn draw_panel(out: &mut String, p: &Panel, ox: f64, oy: f64) {
    let (mut x0, mut x1) = extent(p.series.iter().flat_map(|s| s.x.iter().copied()));
    let (mut y0, mut y1) = extent(p.series.iter().flat_map(|s| s.y.iter().copied()));
    let (w, h) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 1.5 * MARGIN);
    if p.equal_axes {
        let scale = ((x1 - x0) / w).max((y1 - y0) / h);
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        (x0, x1) = (cx - 0.5 * scale * w, cx + 0.5 * scale * w);
        (y0, y1) = (cy - 0.5 * scale * h, cy + 0.5 * scale * h);
    }
    let px = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * w;
    let py = |y: f64| oy + MARGIN * 0.5 + h - (y - y0) / (y1 - y0) * h;
    let _ = writeln!(
        out,
        r##"<g class="panel" data-title="{}"><rect x="{:.1}" y="{:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#888"/>"##,
        escape(&p.title),
        ox + MARGIN,
        oy + MARGIN * 0.5
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        ox + MARGIN + 0.5 * w,
        oy + 16.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
        ox + MARGIN + 0.5 * w,
        oy + PANEL_H - 8.0,
        escape(&p.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" transform="rotate(-90 {:.1} {:.1})" text-anchor="middle">{}</text>"#,
        ox + 14.0,
        oy + MARGIN * 0.5 + 0.5 * h,
        ox + 14.0,
        oy + MARGIN * 0.5 + 0.5 * h,
        escape(&p.y_label)
    );
    for (k, v) in [(0.0, y0), (1.0, y1)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{:.3}</text>"#,
            ox + MARGIN - 3.0,
            oy + MARGIN * 0.5 + h * (1.0 - k) + 3.0,
            v
        );
    }
    for (k, v) in [(0.0, x0), (1.0, x1)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{:.3}</text>"#,
            ox + MARGIN + w * k,
            oy + MARGIN * 0.5 + h + 11.0,
            v
        );
    }
    for (i, s) in p.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-series="{}" data-x="{}" data-values="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            escape(&s.name),
            join(&s.x),
            join(&s.y),
            pts.join(" ")
        );
        let ly = oy + MARGIN * 0.5 + 12.0 + 13.0 * i as f64;
        let lx = ox + PANEL_W - 0.5 * MARGIN - 110.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 3.0,
            escape(&s.name)
        );
    }
    out.push_str("</g>\n");
}

/// Lay panels out in a grid with `columns` columns.
pub fn render_panels(panels: &[Panel], columns: usize) -> String {
    let columns = columns.max(1);
    let rows = panels.len().div_ceil(columns).max(1);
    let (w, h) = (PANEL_W * columns.min(panels.len().max(1)) as f64, PANEL_H * rows as f64);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PANEL_W * (i % columns) as f64, PANEL_H * (i / columns) as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Estimate errors over time and the top-down and side projections of the
/// true path, the belief and the initial plan.
pub fn runlog_panels(log: &RunLog) -> Vec<Panel> {
    let t: Vec<f64> = log.records.iter().map(|r| r.time).collect();
    let errs: Vec<(f64, f64, f64)> = log
        .records
        .iter()
        .map(|r| crate::estimator::state_errors(&r.belief.mean, &r.truth))
        .collect();
    let errors = Panel::new("estimate error", "time (s)", "error")
        .with(Series::new("translation (m)", t.clone(), errs.iter().map(|e| e.0).collect()))
        .with(Series::new("rotation (rad)", t.clone(), errs.iter().map(|e| e.1).collect()))
        .with(Series::new("velocity (m/s)", t, errs.iter().map(|e| e.2).collect()));
    let truth: Vec<_> = std::iter::once(log.start.position())
        .chain(log.records.iter().map(|r| r.truth.position()))
        .collect();
    let belief: Vec<_> = std::iter::once(log.initial_belief.mean.position())
        .chain(log.records.iter().map(|r| r.belief.mean.position()))
        .collect();
    let plan: Vec<_> = log
        .summary
        .initial_plan
        .as_ref()
        .map(|p| p.waypoints.iter().map(|w| w.position).collect())
        .unwrap_or_default();
    let projection = |title: &str, a: usize, b: usize, la: &str, lb: &str| {
        let coords = |pts: &Vec<nalgebra::Vector3<f64>>, i: usize| pts.iter().map(|p| p[i]).collect::<Vec<_>>();
        let mut p = Panel::new(title, la, lb)
            .with(Series::new("truth", coords(&truth, a), coords(&truth, b)))
            .with(Series::new("belief", coords(&belief, a), coords(&belief, b)));
        if !plan.is_empty() {
            p = p.with(Series::new("initial plan", coords(&plan, a), coords(&plan, b)).dashed());
        }
        let g = log.goal.position;
        p = p.with(Series::new("goal", vec![g[a]], vec![g[b]]));
        p.equal_axes = true;
        p
    };
    vec![
        errors,
        projection("top view", 0, 1, "x (m)", "y (m)"),
        projection("side view", 0, 2, "x (m)", "z (m)"),
    ]
}

/// Full filter (solid) against baseline (dashed), one panel per error kind.
pub fn filter_comparison_panels(full: &ErrorCurves, baseline: &ErrorCurves) -> Vec<Panel> {
    let names = ["translation error (m)", "rotation error (rad)", "velocity error (m/s)"];
    names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let x = |e: &ErrorCurves| (0..e.mean.len()).map(|t| t as f64).collect::<Vec<_>>();
            let y = |e: &ErrorCurves| e.mean.iter().map(|m| m[c]).collect::<Vec<_>>();
            Panel::new(name, "timestep", "mean over trials")
                .with(Series::new("full filter", x(full), y(full)))
                .with(Series::new("photometric only", x(baseline), y(baseline)).dashed())
        })
        .collect()
}

/// Bar chart of failure rate and mean control effort per planner.
pub fn comparison_svg(report: &ComparisonReport) -> String {
    let planners: Vec<PlannerKind> = PlannerKind::ALL.into_iter().filter(|k| report.rows.iter().any(|r| r.planner == *k)).collect();
    let metrics: [(&str, Box<dyn Fn(PlannerKind) -> f64>); 3] = [
        ("failure rate", Box::new(|k| report.failure_rate(k))),
        ("mean control effort", Box::new(|k| report.mean_control(k))),
        ("mean collision cost", Box::new(|k| report.mean_collision(k))),
    ];
    let (w, h) = (PANEL_W * metrics.len() as f64, PANEL_H);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (m, (title, f)) in metrics.iter().enumerate() {
        let vals: Vec<f64> = planners.iter().map(|k| f(*k)).collect();
        let top = vals.iter().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12) * 1.1;
        let ox = PANEL_W * m as f64;
        let plot_h = PANEL_H - 1.5 * MARGIN;
        let _ = writeln!(out, r#"<g class="panel" data-title="{title}">"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="16" text-anchor="middle" font-size="13">{title}</text>"#,
            ox + 0.5 * PANEL_W
        );
        let bw = (PANEL_W - 2.0 * MARGIN) / planners.len().max(1) as f64;
        for (i, (k, v)) in planners.iter().zip(&vals).enumerate() {
            let bh = if v.is_finite() { v / top * plot_h } else { 0.0 };
            let x = ox + MARGIN + bw * i as f64 + 0.1 * bw;
            let y = MARGIN * 0.5 + plot_h - bh;
            let _ = writeln!(
                out,
                r#"<rect class="bar" data-planner="{}" data-value="{v}" x="{x:.1}" y="{y:.1}" width="{:.1}" height="{bh:.1}" fill="{}"/>"#,
                k.name(),
                0.8 * bw,
                PALETTE[i % PALETTE.len()]
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{v:.3}</text>"#,
                x + 0.4 * bw,
                MARGIN * 0.5 + plot_h + 14.0,
                k.name(),
                x + 0.4 * bw,
                y - 3.0
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Values of the series named `name` in an SVG produced by this module.
pub fn series_values(svg: &str, name: &str) -> Option<Vec<f64>> {
    let key = format!("data-series=\"{}\"", escape(name));
    let line = svg.lines().find(|l| l.contains(&key))?;
    let start = line.find("data-values=\"")? + "data-values=\"".len();
    let end = start + line[start..].find('"')?;
    line[start..end].split_whitespace().map(|v| v.parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_round_trip() {
        let p = Panel::new("a", "x", "y")
            .with(Series::new("s<1>", vec![0.0, 1.0, 2.0], vec![0.1, -2.5, 1e-7]))
            .with(Series::new("flat", vec![0.0, 1.0], vec![3.0, 3.0]).dashed());
        let svg = render_panels(&[p], 1);
        assert!(svg.starts_with("<svg"));
        assert_eq!(series_values(&svg, "s<1>").unwrap(), vec![0.1, -2.5, 1e-7]);
        assert_eq!(series_values(&svg, "flat").unwrap(), vec![3.0, 3.0]);
        assert!(series_values(&svg, "missing").is_none());
    }

    #[test]
    fn empty_panel_renders() {
        let svg = render_panels(&[Panel::new("empty", "x", "y")], 2);
        assert!(svg.contains("data-title=\"empty\""));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
