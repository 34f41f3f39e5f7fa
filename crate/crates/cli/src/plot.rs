//! Minimal SVG line plots: one panel per metric, shared x axis.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub struct Panel<'a> {
    pub title: &'a str,
    pub series: Vec<(&'a str, Vec<(f64, f64)>)>,
}

const W: f64 = 360.0;
const H: f64 = 220.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64, f64, f64)> {
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        b = Some(match b {
            None => (x, x, y, y),
            Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
        });
    }
    b
}

/// Panels laid out in a row. Non-finite points are skipped.
pub fn render(panels: &[Panel<'_>]) -> String {
    let total_w = W * panels.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    for (p, panel) in panels.iter().enumerate() {
        let ox = p as f64 * W;
        let _ = writeln!(s, r#"<g transform="translate({ox},0)">"#);
        let _ = writeln!(s, r#"<text x="{}" y="14" text-anchor="middle">{}</text>"#, W / 2.0, panel.title);
        let _ = writeln!(
            s,
            r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        if let Some((x0, x1, y0, y1)) = bounds(panel.series.iter().flat_map(|(_, pts)| pts.iter().copied())) {
            let (dx, dy) = ((x1 - x0).max(1e-300), (y1 - y0).max(1e-300));
            let sx = |x: f64| PAD + (x - x0) / dx * (W - 2.0 * PAD);
            let sy = |y: f64| H - PAD - (y - y0) / dy * (H - 2.0 * PAD);
            let _ = writeln!(s, r#"<text x="{PAD}" y="{}" >{x0:.3}</text>"#, H - PAD + 14.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, W - PAD, H - PAD + 14.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, PAD - 2.0, PAD + 4.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, PAD - 2.0, H - PAD);
            for (i, (name, pts)) in panel.series.iter().enumerate() {
                let color = COLORS[i % COLORS.len()];
                let coords: Vec<String> = pts
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                    coords.join(" ")
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
                    PAD + 4.0,
                    PAD + 14.0 * (i + 1) as f64
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

pub fn write(panels: &[Panel<'_>], path: &Path) -> CliResult<()> {
    std::fs::write(path, render(panels)).map_err(|e| CliError::io(path, e))
}
