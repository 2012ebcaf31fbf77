//! Line charts of per-group metrics over epochs, written as plain SVG.
//!
//! One polyline per (run, group). Colour encodes the group and the dash
//! pattern encodes the run. Output is a pure function of the input.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::EpochMetrics;
use super::record::RunRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMetric {
    Accuracy,
    Loss,
    Rank,
}

impl PlotMetric {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "accuracy" => Ok(PlotMetric::Accuracy),
            "loss" => Ok(PlotMetric::Loss),
            "rank" => Ok(PlotMetric::Rank),
            other => Err(Error::UnknownMetric(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PlotMetric::Accuracy => "accuracy",
            PlotMetric::Loss => "loss",
            PlotMetric::Rank => "mean loss rank",
        }
    }

    fn values(self, m: &EpochMetrics) -> &std::collections::BTreeMap<usize, f64> {
        match self {
            PlotMetric::Accuracy => &m.per_group_accuracy,
            PlotMetric::Loss => &m.per_group_loss,
            PlotMetric::Rank => &m.per_group_mean_rank,
        }
    }
}

const PALETTE: [&str; 8] = [
    "#d62728", "#ff7f0e", "#2ca02c", "#9467bd", "#1f77b4", "#8c564b", "#e377c2", "#17becf",
];
const DASHES: [&str; 4] = ["", "6,3", "2,3", "8,3,2,3"];

struct Series {
    label: String,
    group: usize,
    run: usize,
    points: Vec<(usize, f64)>,
}

/// Renders the chart as an SVG document.
pub fn render_svg(records: &[RunRecord], metric: &str) -> Result<String> {
    let metric = PlotMetric::parse(metric)?;
    if records.iter().all(|r| r.epochs.is_empty()) {
        return Err(Error::Data("nothing to plot: no epochs recorded".into()));
    }

    let mut series = Vec::new();
    for (run, record) in records.iter().enumerate() {
        let groups: std::collections::BTreeSet<usize> = record
            .epochs
            .iter()
            .flat_map(|m| metric.values(m).keys().copied())
            .collect();
        for g in groups {
            let points: Vec<(usize, f64)> = record
                .epochs
                .iter()
                .filter_map(|m| metric.values(m).get(&g).map(|&v| (m.epoch, v)))
                .collect();
            series.push(Series {
                label: format!("{} g{}", record.label(), g),
                group: g,
                run,
                points,
            });
        }
    }
    if series.is_empty() {
        return Err(Error::Data(format!(
            "no `{}` values recorded",
            metric.name()
        )));
    }

    let all = series.iter().flat_map(|s| s.points.iter());
    let max_epoch = all.clone().map(|p| p.0).max().unwrap_or(1).max(2);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if metric == PlotMetric::Accuracy {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }

    let (width, height) = (760.0, 440.0);
    let (left, right, top, bottom) = (60.0, 200.0, 30.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x = |epoch: usize| left + plot_w * (epoch - 1) as f64 / (max_epoch - 1) as f64;
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            y(v) + 4.0,
            v
        );
    }
    for e in 1..=max_epoch {
        if max_epoch <= 10 || e == 1 || e % 5 == 0 {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x(e),
                top + plot_h + 16.0,
                e
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        left + plot_w / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        metric.name()
    );

    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[s.group % PALETTE.len()];
        let dash = DASHES[s.run % DASHES.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(e, v)| format!("{:.2},{:.2}", x(e), y(v)))
            .collect();
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash_attr} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 12.0 + 14.0 * i as f64;
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{colour}" stroke-width="1.5"{dash_attr}/>"#,
            ly - 4.0,
            lx + 22.0,
            ly - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#,
            lx + 28.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn emit_plot(records: &[RunRecord], metric: &str, path: &Path) -> Result<()> {
    let svg = render_svg(records, metric)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
