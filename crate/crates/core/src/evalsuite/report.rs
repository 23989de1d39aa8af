//! Metric reporting: CSV rows with confidence intervals and a dependency-free
//! SVG line-chart emitter for training curves.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

// ── CSV ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub ci95: f64,
    pub n_rep: usize,
}

impl MetricRow {
    /// Collapse repetition samples into mean ± half-width of a normal 95%
    /// interval (zero width for a single repetition).
    pub fn from_reps(metric: impl Into<String>, samples: &[f64]) -> Self {
        let (value, ci95) = mean_ci95(samples);
        Self { metric: metric.into(), value, ci95, n_rep: samples.len() }
    }
}

pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    assert!(!samples.is_empty(), "confidence interval of an empty sample");
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Write rows as `metric,value,ci95,n_rep`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "metric,value,ci95,n_rep")?;
    for r in rows {
        if r.metric.contains(',') || r.metric.contains('\n') {
            return Err(Error::contract(format!("metric name {:?} breaks CSV framing", r.metric)));
        }
        writeln!(f, "{},{:.6},{:.6},{}", r.metric, r.value, r.ci95, r.n_rep)?;
    }
    Ok(())
}

// ── SVG charts ───────────────────────────────────────────────────────────

/// One named line of (x, y) points.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

/// Render series as an SVG line chart with axes, tick labels, and a legend.
pub fn svg_line_chart(title: &str, series: &[Series]) -> Result<String> {
    let pts: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::contract("cannot chart empty series"));
    }
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::contract("non-finite chart point"));
    }
    let (mut x0, mut x1) = min_max(pts.iter().map(|p| p.0));
    let (mut y0, mut y1) = min_max(pts.iter().map(|p| p.1));
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"monospace\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" \
         text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN,
    ));
    // Ticks: 5 per axis.
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            sx(fx),
            H - MARGIN + 18.0,
            fmt_tick(fx)
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            sy(fy) + 4.0,
            fmt_tick(fy)
        ));
    }
    // Lines and legend.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        let ly = MARGIN + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"3\"/>\n<text x=\"{}\" y=\"{}\">{}</text>\n",
            W - MARGIN - 130.0 + 24.0,
            W - MARGIN - 130.0 + 30.0,
            ly + 4.0,
            escape(&s.name),
            lx = W - MARGIN - 130.0,
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_svg_chart(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg_line_chart(title, series)?)?;
    Ok(())
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 10000.0) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_collapses_correctly() {
        let (m, ci) = mean_ci95(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(m, 2.0);
        assert_eq!(ci, 0.0);
        let (m, ci) = mean_ci95(&[1.0]);
        assert_eq!((m, ci), (1.0, 0.0));
        // Known case: samples {0, 2} → mean 1, s² = 2, half-width
        // 1.96·√(2/2) = 1.96.
        let (m, ci) = mean_ci95(&[0.0, 2.0]);
        assert!((m - 1.0).abs() < 1e-12 && (ci - 1.96).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricRow::from_reps("fid", &[1.5, 1.7, 1.6]),
            MetricRow { metric: "r@1".into(), value: 0.7, ci95: 0.01, n_rep: 5 },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "metric,value,ci95,n_rep");
        assert!(lines[1].starts_with("fid,1.6"));
        assert_eq!(lines.len(), 3);
        let bad = [MetricRow { metric: "a,b".into(), value: 0.0, ci95: 0.0, n_rep: 1 }];
        assert!(write_metrics_csv(&path, &bad).is_err());
    }

    #[test]
    fn svg_chart_contains_each_series_and_valid_extent() {
        let series = vec![
            Series { name: "train".into(), points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.3)] },
            Series { name: "val<1>".into(), points: vec![(0.0, 1.2), (2.0, 0.6)] },
        ];
        let svg = svg_line_chart("loss curves", &series).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("loss curves"));
        assert!(svg.contains("val&lt;1&gt;"), "names are escaped");
        assert!(svg_line_chart("empty", &[]).is_err());
        let flat = vec![Series { name: "flat".into(), points: vec![(0.0, 1.0), (1.0, 1.0)] }];
        assert!(svg_line_chart("flat", &flat).is_ok(), "degenerate extent is padded");
    }
}
