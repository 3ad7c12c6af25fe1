//! Static SVG heatmaps and line charts.

use std::fmt::Write;

use ndarray::Array2;

const CELL: f64 = 36.0;
const MARGIN: f64 = 70.0;

/// Diverging blue-white-red colour for a value clamped to `[-1, 1]`.
fn colour(v: f64) -> String {
    let t = v.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap of a matrix with values in `[-1, 1]` (e.g. cosines), one
/// labelled cell per entry.
pub fn heatmap(m: &Array2<f64>, title: &str, row_label: &str, col_label: &str) -> String {
    let (rows, cols) = m.dim();
    let width = MARGIN * 2.0 + CELL * cols as f64;
    let height = MARGIN * 2.0 + CELL * rows as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN + CELL * cols as f64 / 2.0,
        height - 15.0,
        escape(col_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{y}" text-anchor="middle" transform="rotate(-90 15 {y})">{}</text>"#,
        escape(row_label),
        y = MARGIN + CELL * rows as f64 / 2.0
    );
    for ((i, j), &v) in m.indexed_iter() {
        let x = MARGIN + CELL * j as f64;
        let y = MARGIN + CELL * i as f64;
        let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#999"/>"##, colour(v));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#, x + CELL / 2.0, y + CELL / 2.0 + 3.0);
    }
    for j in 0..cols {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#, MARGIN + CELL * (j as f64 + 0.5), MARGIN - 6.0);
    }
    for i in 0..rows {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{i}</text>"#, MARGIN - 6.0, MARGIN + CELL * (i as f64 + 0.5) + 3.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline chart of `(x, y)` points on linear axes.
pub fn line_chart(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (480.0, 320.0);
    let (x0, x1) = bounds(points.iter().map(|p| p.0));
    let (y0, y1) = bounds(points.iter().map(|p| p.1));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (w - 2.0 * MARGIN);
    let py = |y: f64| h - MARGIN - (y - y0) / (y1 - y0) * (h - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#999"/>"##, w - 2.0 * MARGIN, h - 2.0 * MARGIN);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 20.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="15" y="{y}" text-anchor="middle" transform="rotate(-90 15 {y})">{}</text>"#, escape(y_label), y = h / 2.0);
    for (v, anchor_x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{v:.3}</text>"#, h - MARGIN + 14.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, MARGIN - 6.0, py(v) + 3.0);
    }
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="rgb(200,40,40)" stroke-width="2"/>"#, path.join(" "));
    for &(x, y) in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="rgb(200,40,40)"/>"#, px(x), py(y));
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
