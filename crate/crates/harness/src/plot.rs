//! Static SVG line charts from report CSVs.

use std::fmt::Write as _;
use std::path::Path;

use crate::report::{self, Row};
use crate::{fsutil, HarnessError, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|x| x == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// One polyline per model over the scenarios, in first-appearance order.
/// `metric` defaults to the metric of the first row.
pub fn render(rows: &[Row], metric: Option<&str>) -> Result<String> {
    let metric = match metric {
        Some(m) => m.to_string(),
        None => rows
            .first()
            .map(|r| r.metric.clone())
            .ok_or_else(|| HarnessError::Data("no data rows to plot".into()))?,
    };
    let rows: Vec<&Row> = rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(HarnessError::Data(format!("no rows for metric {metric:?}")));
    }
    if rows.iter().any(|r| !r.value.is_finite()) {
        return Err(HarnessError::Data("non-finite value in plot data".into()));
    }
    let xs = first_seen(rows.iter().map(|r| r.scenario.as_str()));
    let models = first_seen(rows.iter().map(|r| r.model.as_str()));
    let (mut lo, mut hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.value), b.max(r.value)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |i: usize| LEFT + if xs.len() == 1 { pw / 2.0 } else { pw * i as f64 / (xs.len() - 1) as f64 };
    let py = |v: f64| TOP + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, LEFT - 6.0, py(v) + 4.0);
    }
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(i), TOP + ph + 16.0, escape(x));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">scenario</text>"#, LEFT + pw / 2.0, H - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, escape(&metric));
    for (m, model) in models.iter().enumerate() {
        let color = COLORS[m % COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .enumerate()
            .filter_map(|(i, x)| {
                rows.iter()
                    .find(|r| &r.model == model && &r.scenario == x)
                    .map(|r| format!("{:.1},{:.1}", px(i), py(r.value)))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let ly = TOP + 14.0 * m as f64 + 6.0;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(model));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders `csv` to `svg`. Nothing is written on error.
pub fn emit_plot(csv: &Path, svg: &Path, metric: Option<&str>) -> Result<()> {
    let rows = report::load(csv)?;
    let out = render(&rows, metric)?;
    fsutil::write_atomic(svg, out.as_bytes())
}
