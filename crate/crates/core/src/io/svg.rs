//! Minimal SVG line and scatter plots.

use std::fmt::Write;

use crate::analysis::{CompressionPoint, Frontier, MemoryMetric};
use crate::error::{Error, Result};
use crate::train::CurvePoint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
/// Fraction of the data span added on each side of an axis.
pub const AXIS_MARGIN: f64 = 0.05;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesKind {
    Line,
    Scatter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub kind: SeriesKind,
    /// Drawn larger and connected.
    pub highlight: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// `[min − 5% span, max + 5% span]`; a degenerate span widens by 5% of the
/// magnitude (or by 1 around zero).
pub fn axis_range(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v))))
        })?;
    let span = hi - lo;
    let pad = if span > 0.0 {
        span * AXIS_MARGIN
    } else if lo != 0.0 {
        lo.abs() * AXIS_MARGIN
    } else {
        1.0
    };
    Some((lo - pad, hi + pad))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{:.4}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

impl Plot {
    pub fn render(&self) -> Result<String> {
        let all: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        let (x0, x1) = axis_range(all.iter().map(|p| p.0)).ok_or(Error::Empty("plot data"))?;
        let (y0, y1) = axis_range(all.iter().map(|p| p.1)).ok_or(Error::Empty("plot data"))?;
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<g class="axes" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                sx(xv),
                TOP + ph + 16.0,
                tick(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                sy(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        let _ = writeln!(s, "</g>");

        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let _ = writeln!(s, r#"<g class="series" data-label="{}">"#, escape(&series.label));
            let connect = series.kind == SeriesKind::Line || series.highlight;
            if connect && series.points.len() > 1 {
                let path: Vec<String> = series
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="{}" points="{}"/>"#,
                    if series.highlight { 2.0 } else { 1.5 },
                    path.join(" ")
                );
            }
            if series.kind == SeriesKind::Scatter {
                let r = if series.highlight { 5.0 } else { 3.0 };
                for &(x, y) in &series.points {
                    let _ = writeln!(
                        s,
                        r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}"/>"#,
                        sx(x),
                        sy(y)
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
                LEFT + 8.0,
                TOP + 14.0 + 14.0 * i as f64,
                escape(&series.label)
            );
            let _ = writeln!(s, "</g>");
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

/// Accuracy against memory, frontier points highlighted and connected.
pub fn frontier_plot(frontier: &Frontier, metric: MemoryMetric, metric_label: &str) -> Result<String> {
    if frontier.frontier.is_empty() {
        return Err(Error::Empty("frontier"));
    }
    let pts = |v: &[CompressionPoint]| v.iter().map(|p| (p.memory(metric) as f64, p.accuracy)).collect();
    let x_label = match metric {
        MemoryMetric::Bits => "memory (bits)",
        MemoryMetric::NonzeroParams => "nonzero parameters",
    };
    let mut series = Vec::new();
    if !frontier.dominated.is_empty() {
        series.push(Series {
            label: "dominated".into(),
            points: pts(&frontier.dominated),
            kind: SeriesKind::Scatter,
            highlight: false,
        });
    }
    series.push(Series {
        label: "frontier".into(),
        points: pts(&frontier.frontier),
        kind: SeriesKind::Scatter,
        highlight: true,
    });
    Plot {
        title: format!("{metric_label} vs memory"),
        x_label: x_label.into(),
        y_label: metric_label.into(),
        series,
    }
    .render()
}

/// Horizontal axis of a learning-curve plot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveAxis {
    Steps,
    Seconds,
    Flops,
}

/// Validation loss of several runs against steps, seconds or FLOPs.
pub fn curve_plot(curves: &[(String, Vec<CurvePoint>)], axis: CurveAxis) -> Result<String> {
    let (name, pick): (&str, fn(&CurvePoint) -> f64) = match axis {
        CurveAxis::Steps => ("gradient steps", |p| p.step as f64),
        CurveAxis::Seconds => ("seconds", |p| p.seconds),
        CurveAxis::Flops => ("training FLOPs", |p| p.flops),
    };
    Plot {
        title: format!("validation loss vs {name}"),
        x_label: name.into(),
        y_label: "validation loss".into(),
        series: curves
            .iter()
            .map(|(label, pts)| {
                let mut sorted = pts.clone();
                sorted.sort_by_key(|p| p.step);
                Series {
                    label: label.clone(),
                    points: sorted.iter().map(|p| (pick(p), p.val_loss)).collect(),
                    kind: SeriesKind::Line,
                    highlight: false,
                }
            })
            .collect(),
    }
    .render()
}
