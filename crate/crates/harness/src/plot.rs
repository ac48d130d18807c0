//! Minimal SVG line plots for sweep outputs. No interactivity, no
//! dependencies; just axes, polylines and a legend.

use std::io::Write;
use std::path::Path;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    (0..=count).map(|i| lo + span * i as f64 / count as f64).collect()
}

/// Writes a line plot of the series to an SVG file.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> std::io::Result<()> {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x_lo, x_hi) = bounds(&xs, 0.0);
    let (y_lo, y_hi) = bounds(&ys, 0.05);

    let px = |x: f64| {
        MARGIN_L + (x - x_lo) / (x_hi - x_lo).max(1e-12) * (WIDTH - MARGIN_L - MARGIN_R)
    };
    let py = |y: f64| {
        HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo).max(1e-12) * (HEIGHT - MARGIN_T - MARGIN_B)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push_str(&format!(
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    ));

    // axes
    svg.push_str(&format!(
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        HEIGHT - MARGIN_B
    ));

    for t in nice_ticks(x_lo, x_hi, 5) {
        let x = px(t);
        svg.push_str(&format!(
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        ));
        svg.push_str(&format!(
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{t:.3}</text>"#,
            HEIGHT - MARGIN_B + 18.0
        ));
    }
    for t in nice_ticks(y_lo, y_hi, 5) {
        let y = py(t);
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="black"/>"#,
            MARGIN_L - 5.0,
            MARGIN_L
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{t:.3}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0
        ));
        svg.push_str(&format!(
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/>"##,
            MARGIN_L,
            WIDTH - MARGIN_R
        ));
    }

    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x"));
        let path_data: Vec<String> = sorted
            .iter()
            .enumerate()
            .map(|(k, (x, y))| {
                format!("{}{:.2},{:.2}", if k == 0 { "M" } else { "L" }, px(*x), py(*y))
            })
            .collect();
        svg.push_str(&format!(
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path_data.join(" ")
        ));
        for (x, y) in &sorted {
            svg.push_str(&format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(*x),
                py(*y)
            ));
        }
        // legend
        let ly = MARGIN_T + 16.0 * i as f64;
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            WIDTH - MARGIN_R - 120.0,
            WIDTH - MARGIN_R - 96.0
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN_R - 90.0,
            ly + 4.0,
            escape(&s.name)
        ));
    }

    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(svg.as_bytes())
}

fn bounds(values: &[f64], pad: f64) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    (lo - pad * span, hi + pad * span)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_wellformed_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let series = vec![
            Series {
                name: "rank1".into(),
                points: vec![(0.0, 0.1), (0.2, 0.5), (0.4, 0.3)],
            },
            Series {
                name: "map".into(),
                points: vec![(0.0, 0.05), (0.2, 0.4), (0.4, 0.25)],
            },
        ];
        line_plot(&path, "metric vs ratio", "ratio", "metric", &series).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<path").count(), 2);
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.svg");
        let series = vec![Series {
            name: "flat".into(),
            points: vec![(1.0, 0.5)],
        }];
        line_plot(&path, "one point", "x", "y", &series).unwrap();
        assert!(path.exists());
    }
}
