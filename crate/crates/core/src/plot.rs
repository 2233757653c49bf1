//! Minimal SVG line chart of HR, MRR and MAP against K.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluator::MetricReport;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const PAD: f64 = 40.0;

pub fn metrics_svg(report: &MetricReport, title: &str) -> String {
    let rows = &report.mean;
    let kmax = rows.iter().map(|r| r.k).max().unwrap_or(1).max(1) as f64;
    let x = |k: usize| PAD + (k as f64 / kmax) * (WIDTH - 2.0 * PAD);
    let y = |v: f64| HEIGHT - PAD - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{PAD}" y="20" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = HEIGHT - PAD,
        r = WIDTH - PAD
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(svg, r#"<text x="8" y="{:.1}">{tick:.2}</text>"#, y(tick) + 4.0);
    }
    for r in rows {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x(r.k), HEIGHT - PAD + 14.0, r.k);
    }
    let series: [(&str, &str, fn(&crate::evaluator::MetricRow) -> f64); 3] = [
        ("HR", "#1f77b4", |r| r.hr),
        ("MRR", "#d62728", |r| r.mrr),
        ("MAP", "#2ca02c", |r| r.map),
    ];
    for (i, (name, color, value)) in series.iter().enumerate() {
        let points: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x(r.k), y(value(r)))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{name}</text>"#, WIDTH - PAD - 30.0);
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_metrics_svg(report: &MetricReport, title: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_svg(report, title)).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::MetricRow;

    #[test]
    fn one_polyline_per_metric() {
        let report = MetricReport {
            ks: vec![1, 10],
            runs: vec![],
            mean: vec![
                MetricRow { k: 1, hr: 0.1, mrr: 0.4, map: 0.4 },
                MetricRow { k: 10, hr: 0.7, mrr: 0.6, map: 0.5 },
            ],
        };
        let svg = metrics_svg(&report, "a<b");
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
