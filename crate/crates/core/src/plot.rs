//! Minimal SVG line and bar charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, y: (f64, f64)) {
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    )
    .unwrap();
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    writeln!(
        out,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" stroke="black" fill="none"/>"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(xlabel)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    )
    .unwrap();
    for i in 0..=4 {
        let v = y.0 + (y.1 - y.0) * i as f64 / 4.0;
        let py = y1 - (y1 - y0) * i as f64 / 4.0;
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            tick(v)
        )
        .unwrap();
        writeln!(out, r##"<path d="M{x0},{py} L{x1},{py}" stroke="#ddd"/>"##).unwrap();
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Line chart; each series gets a legend entry.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, yr);
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    for i in 0..=4 {
        let v = xr.0 + (xr.1 - xr.0) * i as f64 / 4.0;
        let px = x0 + (x1 - x0) * i as f64 / 4.0;
        writeln!(
            out,
            r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            y1 + 16.0,
            tick(v)
        )
        .unwrap();
    }
    let sx = |x: f64| x0 + (x - xr.0) / (xr.1 - xr.0) * (x1 - x0);
    let sy = |y: f64| y1 - (y - yr.0) / (yr.1 - yr.0) * (y1 - y0);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            writeln!(
                out,
                r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        writeln!(
            out,
            r#"<path d="M{},{ly} L{},{ly}" stroke="{color}" stroke-width="3"/>"#,
            x1 + 10.0,
            x1 + 30.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            x1 + 36.0,
            ly + 4.0,
            escape(&s.label)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart with one bar per label.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let yr = range(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let yr = (yr.0.min(0.0), yr.1);
    let mut out = String::new();
    frame(&mut out, title, "", ylabel, yr);
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let n = bars.len().max(1) as f64;
    let slot = (x1 - x0) / n;
    let sy = |y: f64| y1 - (y - yr.0) / (yr.1 - yr.0) * (y1 - y0);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = x0 + slot * i as f64 + slot * 0.15;
        let top = if v.is_finite() { sy(*v) } else { y1 };
        writeln!(
            out,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.7,
            (y1 - top).max(0.0),
            COLORS[0]
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            x + slot * 0.35,
            y1 + 14.0,
            escape(label)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart(
            "t<1>",
            "x",
            "y",
            &[Series {
                label: "a".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("polyline") && s.contains("t&lt;1&gt;"));
        let b = bar_chart(
            "b",
            "erank",
            &[("0.wq".into(), 2.0), ("0.wv".into(), f64::NAN)],
        );
        assert_eq!(b.matches("<rect").count(), 3);
        assert_eq!(
            line_chart("e", "x", "y", &[]),
            line_chart("e", "x", "y", &[])
        );
    }
}
