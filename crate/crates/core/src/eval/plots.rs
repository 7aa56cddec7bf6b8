//! Minimal SVG plotting: polylines with axes and min/max labels, no
//! external dependencies.

use std::fmt::Write as _;

/// One named data series.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 800.0;
const H: f64 = 500.0;
const MARGIN: f64 = 60.0;

/// Render series as an SVG document with axes, tick labels at the data
/// extremes, and a small legend.
pub fn polyline_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let sx = (W - 2.0 * MARGIN) / (xmax - xmin);
    let sy = (H - 2.0 * MARGIN) / (ymax - ymin);
    let px = |x: f64| MARGIN + (x - xmin) * sx;
    let py = |y: f64| H - MARGIN - (y - ymin) * sy;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-size="16" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    // Axes.
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    // Extreme tick labels.
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif">{:.3}</text>"#,
        MARGIN,
        H - MARGIN + 16.0,
        xmin
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{:.3}</text>"#,
        W - MARGIN,
        H - MARGIN + 16.0,
        xmax
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{:.3}</text>"#,
        MARGIN - 6.0,
        H - MARGIN,
        ymin
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{:.3}</text>"#,
        MARGIN - 6.0,
        MARGIN + 4.0,
        ymax
    );
    // Axis labels.
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let _ = write!(d, "{:.2},{:.2} ", px(x), py(y));
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}" font-family="sans-serif">{}</text>"#,
            W - MARGIN + 4.0,
            MARGIN + 16.0 * i as f64,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_wellformed_svg_with_all_series() {
        let svg = polyline_svg(
            "demo",
            "x",
            "y",
            &[
                Series { name: "a", points: vec![(0.0, 0.0), (1.0, 1.0)] },
                Series { name: "b", points: vec![(0.0, 1.0), (1.0, 0.0)] },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("demo"));
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = polyline_svg("empty", "x", "y", &[]);
        assert!(svg.contains("</svg>"));
    }
}
