//! Static SVG of the trajectory plane.
//!
//! Start positions are squares, end positions circles. Around each end point
//! the norm-1 unsafe region `|dx|/r1 + |dy|/r2 <= 1` is drawn as a diamond.

use std::fmt::Write as _;

use nalgebra::Vector2;

use super::logs::TrajectoryLog;
use crate::safety::CbfParams;

const COLOURS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const SIZE: f64 = 600.0;
const MARGIN: f64 = 40.0;

struct Frame {
    min: Vector2<f64>,
    scale: f64,
}

impl Frame {
    fn fit(points: &[Vector2<f64>], pad: Vector2<f64>) -> Self {
        let mut min = Vector2::repeat(f64::INFINITY);
        let mut max = Vector2::repeat(f64::NEG_INFINITY);
        for p in points.iter().filter(|p| p.iter().all(|x| x.is_finite())) {
            min = min.inf(&(p - pad));
            max = max.sup(&(p + pad));
        }
        if !min.iter().all(|x| x.is_finite()) {
            min = Vector2::repeat(-1.0);
            max = Vector2::repeat(1.0);
        }
        let span = (max - min).max().max(1e-9);
        Self { min, scale: (SIZE - 2.0 * MARGIN) / span }
    }

    fn map(&self, p: &Vector2<f64>) -> (f64, f64) {
        let x = MARGIN + (p.x - self.min.x) * self.scale;
        // SVG y grows downward
        let y = SIZE - MARGIN - (p.y - self.min.y) * self.scale;
        (x, y)
    }
}

pub fn render_svg(log: &TrajectoryLog, params: &CbfParams) -> String {
    let n = log.agents();
    let lines: Vec<Vec<Vector2<f64>>> = (1..=n).map(|a| log.polyline(a)).collect();
    let all: Vec<Vector2<f64>> = lines.iter().flatten().copied().collect();
    let frame = Frame::fit(&all, Vector2::new(params.r1, params.r2));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (idx, line) in lines.iter().enumerate() {
        let colour = COLOURS[idx % COLOURS.len()];
        let (Some(first), Some(last)) = (line.first(), line.last()) else { continue };
        let pts: Vec<String> = line
            .iter()
            .map(|p| {
                let (x, y) = frame.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="agent-{}" fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            idx + 1,
            pts.join(" ")
        );
        let (sx, sy) = frame.map(first);
        let _ = writeln!(
            svg,
            r#"<rect class="start" x="{:.2}" y="{:.2}" width="8" height="8" fill="{colour}"/>"#,
            sx - 4.0,
            sy - 4.0
        );
        let (ex, ey) = frame.map(last);
        let _ = writeln!(svg, r#"<circle class="end" cx="{ex:.2}" cy="{ey:.2}" r="5" fill="none" stroke="{colour}" stroke-width="2"/>"#);
        let corners = [
            Vector2::new(last.x + params.r1, last.y),
            Vector2::new(last.x, last.y + params.r2),
            Vector2::new(last.x - params.r1, last.y),
            Vector2::new(last.x, last.y - params.r2),
        ];
        let diamond: Vec<String> = corners
            .iter()
            .map(|c| {
                let (x, y) = frame.map(c);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="safety" points="{}" fill="{colour}" fill-opacity="0.1" stroke="{colour}" stroke-dasharray="4 3"/>"#,
            diamond.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{colour}">{}</text>"#,
            sx + 6.0,
            sy - 6.0,
            idx + 1
        );
    }
    svg.push_str("</svg>\n");
    svg
}
