//! Metrics figures written directly as SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::io::write_atomic;
use crate::train::MetricsRecord;

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean of the last `window` values up to and including each position.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// First epoch kept for correlation statistics: `round(fraction · last)`.
pub fn warmup_cutoff(records: &[MetricsRecord], fraction: f64) -> usize {
    let last = records.iter().map(|r| r.epoch).max().unwrap_or(0);
    (fraction * last as f64).round() as usize
}

/// `(ee_avg, train_cost)` pairs past the warmup, skipping rows without EE.
pub fn ee_cost_pairs(records: &[MetricsRecord], fraction: f64) -> (Vec<f64>, Vec<f64>) {
    let cutoff = warmup_cutoff(records, fraction);
    records
        .iter()
        .filter(|r| r.epoch >= cutoff)
        .filter_map(|r| r.ee_avg.map(|ee| (ee, r.train_cost)))
        .unzip()
}

pub fn ee_cost_correlation(records: &[MetricsRecord], fraction: f64) -> Option<f64> {
    let (ee, cost) = ee_cost_pairs(records, fraction);
    pearson(&ee, &cost)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

struct Series<'a> {
    label: &'a str,
    points: Vec<(f64, f64)>,
    line: bool,
}

struct Chart<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    series: Vec<Series<'a>>,
    note: Option<String>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1.0) {
        let pad = 0.5 * lo.abs().max(1.0);
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart<'_> {
    fn render(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let (x0, x1) = range(all().map(|p| p.0));
        let (y0, y1) = range(all().map(|p| p.1));
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_L + pw / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                MARGIN_T + ph + 18.0,
                tick(xv)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                sy(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(self.y_label)
        );
        for (k, s) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| (sx(x), sy(y)))
                .collect();
            if s.line && pts.len() > 1 {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
            } else {
                for (x, y) in &pts {
                    let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
                }
            }
            let ly = MARGIN_T + 14.0 + 18.0 * k as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{lx}" y="{:.1}" width="12" height="4" fill="{color}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
                ly - 6.0,
                lx + 18.0,
                escape(s.label)
            );
        }
        if let Some(note) = &self.note {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                MARGIN_L + pw + 12.0,
                MARGIN_T + 14.0 + 18.0 * self.series.len() as f64 + 8.0,
                escape(note)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    /// Pearson r of average EE against train cost past the warmup.
    pub pearson_r: Option<f64>,
    pub correlation_points: usize,
}

/// Writes `accuracy.svg`, `cost.svg`, `entropy.svg` and `ee_vs_cost.svg`.
pub fn write_figures(
    records: &[MetricsRecord],
    out_dir: &Path,
    ee_window: usize,
    warmup_fraction: f64,
) -> Result<PlotReport> {
    let epochs: Vec<f64> = records.iter().map(|r| r.epoch as f64).collect();
    let xy = |f: fn(&MetricsRecord) -> f64| -> Vec<(f64, f64)> {
        epochs.iter().zip(records).map(|(&e, r)| (e, f(r))).collect()
    };
    let accuracy = Chart {
        title: "Accuracy",
        x_label: "epoch",
        y_label: "accuracy",
        series: vec![
            Series { label: "train", points: xy(|r| r.train_acc), line: true },
            Series { label: "test", points: xy(|r| r.test_acc), line: true },
        ],
        note: None,
    };
    let cost = Chart {
        title: "Cost",
        x_label: "epoch",
        y_label: "square-distance cost",
        series: vec![
            Series { label: "train", points: xy(|r| r.train_cost), line: true },
            Series { label: "test", points: xy(|r| r.test_cost), line: true },
        ],
        note: None,
    };

    let (ee_epochs, ee_avg): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.ee_avg.map(|v| (r.epoch as f64, v)))
        .unzip();
    let smoothed = trailing_mean(&ee_avg, ee_window);
    let smooth_label = format!("trailing mean ({ee_window})");
    let entropy = Chart {
        title: "Average entanglement entropy",
        x_label: "epoch",
        y_label: "EE (nats)",
        series: vec![
            Series {
                label: "class average",
                points: ee_epochs.iter().copied().zip(ee_avg.iter().copied()).collect(),
                line: true,
            },
            Series {
                label: &smooth_label,
                points: ee_epochs.iter().copied().zip(smoothed).collect(),
                line: true,
            },
        ],
        note: None,
    };

    let (ee, train_cost) = ee_cost_pairs(records, warmup_fraction);
    let r = pearson(&ee, &train_cost);
    let scatter = Chart {
        title: "EE against train cost (post warmup)",
        x_label: "train cost",
        y_label: "average EE (nats)",
        series: vec![Series {
            label: "epochs",
            points: train_cost.iter().copied().zip(ee.iter().copied()).collect(),
            line: false,
        }],
        note: Some(match r {
            Some(r) => format!("Pearson r = {r:.3}"),
            None => "Pearson r undefined".to_string(),
        }),
    };

    let mut files = Vec::new();
    for (name, chart) in [
        ("accuracy.svg", accuracy),
        ("cost.svg", cost),
        ("entropy.svg", entropy),
        ("ee_vs_cost.svg", scatter),
    ] {
        let path = out_dir.join(name);
        write_atomic(&path, chart.render().as_bytes())?;
        files.push(path);
    }
    Ok(PlotReport {
        files,
        pearson_r: r,
        correlation_points: ee.len(),
    })
}
