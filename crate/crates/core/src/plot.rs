//! Loss curves as a self-contained SVG document.

use std::fmt::Write;

use crate::harness::{RunLog, LOSS_COLUMNS};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;
const LEGEND: f64 = 110.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#444444"];

/// One polyline per loss column, on shared axes. Non-finite values are
/// dropped from their curve.
pub fn loss_curves_svg(log: &RunLog) -> String {
    let series: Vec<Vec<(f64, f64)>> = (0..LOSS_COLUMNS.len())
        .map(|k| {
            log.rows
                .iter()
                .map(|r| (r.step as f64, r.losses()[k]))
                .filter(|(_, v)| v.is_finite())
                .collect()
        })
        .collect();
    let all = || series.iter().flatten();
    let (mut x0, mut x1) = bounds(all().map(|p| p.0));
    let (mut y0, mut y1) = bounds(all().map(|p| p.1));
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, MARGIN + plot_w, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    );
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, y + 4.0, tick(v));
    }
    for (v, x) in [(x0, left), (x1, right)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (left + right) / 2.0, HEIGHT - 10.0);

    for (k, pts) in series.iter().enumerate() {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-term="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            LOSS_COLUMNS[k],
            COLORS[k],
            coords.join(" ")
        );
        let ly = top + 18.0 * k as f64;
        let lx = right + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            COLORS[k],
            lx + 26.0,
            ly + 4.0,
            LOSS_COLUMNS[k]
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 0.0)
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::LogRow;

    fn row(step: u64, v: f64) -> LogRow {
        LogRow {
            step,
            src: v,
            scc: -v,
            hdce: 2.0 * v,
            gan_g: 0.7,
            gan_d: 1.3,
            total: 3.0 * v,
            wall_ms: 1.0,
        }
    }

    #[test]
    fn one_polyline_per_term() {
        let log = RunLog {
            rows: (1..=100).map(|i| row(i, 1.0 / i as f64)).collect(),
        };
        let svg = loss_curves_svg(&log);
        assert_eq!(svg.matches("<polyline").count(), 6);
        for name in LOSS_COLUMNS {
            assert!(svg.contains(&format!("data-term=\"{name}\"")));
        }
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn empty_and_single_row_logs_still_render() {
        for rows in [vec![], vec![row(1, 0.5)]] {
            let svg = loss_curves_svg(&RunLog { rows });
            assert_eq!(svg.matches("<polyline").count(), 6);
            assert!(!svg.contains("NaN"));
        }
    }
}
