//! Metric tables and line plots against the proposal count M.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

const METRICS: [&str; 4] = ["mean_rank", "map", "mar", "rmse"];
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

type Table<'a> = BTreeMap<(String, usize), BTreeMap<&'a str, &'a MetricReport>>;

fn table(reports: &[MetricReport]) -> Table<'_> {
    let mut t: Table = BTreeMap::new();
    for r in reports {
        let method = r.method.clone().unwrap_or_else(|| "-".into());
        t.entry((method, r.m)).or_default().insert(r.metric.as_str(), r);
    }
    t
}

/// One row per (method, M) with value and interval columns for every metric.
pub fn to_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("method,M,n_records");
    for m in METRICS {
        let _ = write!(s, ",{m},{m}_ci_low,{m}_ci_high");
    }
    s.push('\n');
    for ((method, m), row) in table(reports) {
        let n = row.values().map(|r| r.n_records).max().unwrap_or(0);
        let _ = write!(s, "{method},{m},{n}");
        for metric in METRICS {
            match row.get(metric) {
                Some(r) => {
                    let _ = write!(s, ",{},{},{}", r.value, r.ci_low, r.ci_high);
                }
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    s
}

/// Line plot of one metric against M, one series per method with 95% interval bars.
pub fn plot_svg(reports: &[MetricReport], metric: &str) -> Option<String> {
    let mut series: BTreeMap<String, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.metric == metric) {
        series
            .entry(r.method.clone().unwrap_or_else(|| "-".into()))
            .or_default()
            .push(r);
    }
    if series.values().all(|v| v.len() < 2) {
        return None;
    }
    for v in series.values_mut() {
        v.sort_by_key(|r| r.m);
    }
    let all = series.values().flatten();
    let (m_lo, m_hi) = all.clone().fold((usize::MAX, 0), |(a, b), r| (a.min(r.m), b.max(r.m)));
    let (mut y_lo, mut y_hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.ci_low), b.max(r.ci_high))
    });
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let (w, h, left, right, top, bottom) = (480.0, 320.0, 60.0, 20.0, 30.0, 40.0);
    let x = |m: usize| {
        let span = (m_hi - m_lo).max(1) as f64;
        left + (m - m_lo) as f64 / span * (w - left - right)
    };
    let y = |v: f64| top + (y_hi - v) / (y_hi - y_lo) * (h - top - bottom);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">{metric} vs M</text>", w / 2.0);
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - bottom,
        w - right,
        h - bottom
    );
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>", h - bottom);
    for m in m_lo..=m_hi {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{m}</text>",
            x(m),
            h - bottom + 16.0
        );
    }
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, (method, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", x(r.m), y(r.value))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for r in pts {
            let _ = writeln!(
                s,
                "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"{c}\"/>",
                x(r.m),
                y(r.ci_low),
                y(r.ci_high)
            );
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", x(r.m), y(r.value));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{method}</text>",
            left + 10.0,
            top + 14.0 * (i + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes `metrics.csv` and one SVG per metric that varies with M.
pub fn write_report(reports: &[MetricReport], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join("metrics.csv");
    fs::write(&csv, to_csv(reports)).map_err(|e| Error::io(&csv, e))?;
    written.push(csv);
    for metric in METRICS {
        if let Some(svg) = plot_svg(reports, metric) {
            let p = dir.join(format!("{metric}.svg"));
            fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(method: &str, metric: &str, m: usize, v: f64) -> MetricReport {
        MetricReport {
            metric: metric.into(),
            method: Some(method.into()),
            value: v,
            ci_low: v - 0.1,
            ci_high: v + 0.1,
            m,
            n_records: 10,
        }
    }

    #[test]
    fn one_row_per_method_and_m() {
        let rs = vec![
            rep("base", "mean_rank", 1, 1.0),
            rep("base", "map", 1, 0.5),
            rep("base", "mean_rank", 2, 1.4),
            rep("reranked", "mean_rank", 1, 1.0),
        ];
        let csv = to_csv(&rs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("base,1,10,1,0.9,1.1,0.5,"));
        assert!(lines[3].ends_with(",,,,,,,,,"));
    }

    #[test]
    fn plot_needs_two_points() {
        let rs = vec![rep("base", "rmse", 5, 2.0)];
        assert!(plot_svg(&rs, "rmse").is_none());
        let rs = vec![rep("base", "mar", 1, 0.2), rep("base", "mar", 2, 0.3)];
        assert!(plot_svg(&rs, "mar").unwrap().contains("<polyline"));
    }
}
