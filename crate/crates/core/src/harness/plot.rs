//! Hand-drawn SVG output: a categorical line plot and grayscale rasters.

use std::fmt::Write as _;

use crate::analysis::GrayImage;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot over evenly spaced categories with optional symmetric error
/// bars. `points` are `(label, y, err)`.
pub fn category_plot(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> String {
    let finite: Vec<f64> = points
        .iter()
        .filter(|p| p.1.is_finite())
        .flat_map(|p| [p.1 - p.2.max(0.0), p.1 + p.2.max(0.0)])
        .collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let n = points.len().max(1);
    let x_of = |i: usize| LEFT + pw * (i as f64 + 0.5) / n as f64;
    let y_of = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let mut w = |line: String| {
        s += &line;
        s.push('\n');
    };
    w(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    ));
    w(format!(r#"<rect width="{W}" height="{H}" fill="white"/>"#));
    w(format!(
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        esc(title)
    ));
    w(format!(
        r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    ));
    w(format!(r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, TOP + ph));
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        w(format!(
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        ));
    }
    for (i, (label, _, _)) in points.iter().enumerate() {
        w(format!(
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x_of(i),
            TOP + ph + 16.0,
            esc(label)
        ));
    }
    w(format!(
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        esc(x_label)
    ));
    w(format!(
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(y_label)
    ));
    let line: Vec<String> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.1.is_finite())
        .map(|(i, p)| format!("{:.1},{:.1}", x_of(i), y_of(p.1)))
        .collect();
    w(format!(
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        line.join(" ")
    ));
    for (i, (_, y, e)) in points.iter().enumerate().filter(|(_, p)| p.1.is_finite()) {
        let x = x_of(i);
        if *e > 0.0 {
            w(format!(
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="steelblue"/>"#,
                y_of(y - e),
                y_of(y + e)
            ));
        }
        w(format!(r#"<circle cx="{x:.1}" cy="{:.1}" r="3.5" fill="steelblue"/>"#, y_of(*y)));
    }
    w("</svg>".into());
    s
}

/// Grayscale raster as one rectangle per pixel, `cell` units wide. Row 0
/// of the image is drawn at the top.
pub fn gray_svg(img: &GrayImage, cell: usize) -> String {
    let (w, h) = (img.width * cell, img.height * cell);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#);
    s.push('\n');
    for r in 0..img.height {
        for c in 0..img.width {
            let g = (img.pixels[r * img.width + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                c * cell,
                r * cell
            )
            .expect("string write");
        }
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_has_one_marker_per_point() {
        let pts: Vec<(String, f64, f64)> = [0.0, 0.25, 1.0].iter().map(|&l| (format!("{l}"), 0.3 + l / 10.0, 0.01)).collect();
        let svg = category_plot("t", "x", "y", &pts);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg, category_plot("t", "x", "y", &pts));
    }

    #[test]
    fn missing_points_are_skipped() {
        let pts = vec![("a".to_string(), f64::NAN, 0.0), ("b".to_string(), 0.5, 0.0)];
        assert_eq!(category_plot("t", "x", "y", &pts).matches("<circle").count(), 1);
    }

    #[test]
    fn gray_raster_size() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0],
        };
        let svg = gray_svg(&img, 4);
        assert_eq!(svg.matches("<rect").count(), 6);
        assert!(svg.contains("rgb(255,255,255)") && svg.contains("rgb(0,0,0)"));
    }
}
