//! SVG scatter plots over the density contours of a 2-d world.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::world::GaussianMixture;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 640.0;
const MARGIN: f64 = 20.0;
const GRID: usize = 120;
/// Contour levels, as drops in log density below the grid maximum.
const LEVEL_DROPS: [f64; 6] = [0.5, 1.5, 3.0, 5.0, 8.0, 12.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub color: String,
    pub points: Vec<Vec<f64>>,
    /// Draw a polyline through the points in order.
    pub connect: bool,
    pub radius: f64,
}

impl Layer {
    pub fn points(name: &str, color: &str, points: Vec<Vec<f64>>) -> Self {
        Self {
            name: name.into(),
            color: color.into(),
            points,
            connect: false,
            radius: 4.0,
        }
    }

    pub fn path(name: &str, color: &str, points: Vec<Vec<f64>>) -> Self {
        Self {
            connect: true,
            radius: 2.0,
            ..Self::points(name, color, points)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Bounds {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn bounds(world: &GaussianMixture, layers: &[Layer]) -> Bounds {
    let mut b = Bounds {
        x0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y0: f64::INFINITY,
        y1: f64::NEG_INFINITY,
    };
    let mut include = |x: f64, y: f64| {
        if x.is_finite() && y.is_finite() {
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
        }
    };
    for c in world.components() {
        let (sx, sy) = (3.0 * c.variances[0].sqrt(), 3.0 * c.variances[1].sqrt());
        include(c.mean[0] - sx, c.mean[1] - sy);
        include(c.mean[0] + sx, c.mean[1] + sy);
    }
    for layer in layers {
        for p in &layer.points {
            include(p[0], p[1]);
        }
    }
    // square aspect with a little padding
    let cx = 0.5 * (b.x0 + b.x1);
    let cy = 0.5 * (b.y0 + b.y1);
    let half = 0.55 * (b.x1 - b.x0).max(b.y1 - b.y0).max(1e-6);
    Bounds {
        x0: cx - half,
        x1: cx + half,
        y0: cy - half,
        y1: cy + half,
    }
}

/// Marching squares over a `values[row][col]` grid; returns line segments in
/// grid coordinates `(col, row)`.
fn contour_segments(values: &[Vec<f64>], level: f64) -> Vec<[(f64, f64); 2]> {
    let mut segments = Vec::new();
    let cross = |a: f64, b: f64| (level - a) / (b - a);
    for r in 0..values.len() - 1 {
        for c in 0..values[r].len() - 1 {
            // corners counter-clockwise from bottom-left
            let v = [
                values[r][c],
                values[r][c + 1],
                values[r + 1][c + 1],
                values[r + 1][c],
            ];
            let pos = [
                (c as f64, r as f64),
                (c as f64 + 1.0, r as f64),
                (c as f64 + 1.0, r as f64 + 1.0),
                (c as f64, r as f64 + 1.0),
            ];
            let mut hits = Vec::with_capacity(4);
            for e in 0..4 {
                let (i, j) = (e, (e + 1) % 4);
                if (v[i] >= level) != (v[j] >= level) {
                    let s = cross(v[i], v[j]);
                    hits.push((
                        pos[i].0 + s * (pos[j].0 - pos[i].0),
                        pos[i].1 + s * (pos[j].1 - pos[i].1),
                    ));
                }
            }
            match hits.len() {
                2 => segments.push([hits[0], hits[1]]),
                4 => {
                    // saddle: resolve with the cell-centre value
                    let centre = v.iter().sum::<f64>() / 4.0;
                    if (centre >= level) == (v[0] >= level) {
                        segments.push([hits[0], hits[3]]);
                        segments.push([hits[1], hits[2]]);
                    } else {
                        segments.push([hits[0], hits[1]]);
                        segments.push([hits[2], hits[3]]);
                    }
                }
                _ => {}
            }
        }
    }
    segments
}

/// Renders density contours of `world` with the given layers on top.
pub fn render_svg(world: &GaussianMixture, layers: &[Layer], title: &str) -> Result<String> {
    if world.dimension() != 2 {
        return Err(Error::Config(format!(
            "plots need a 2-d world, this one has dimension {}",
            world.dimension()
        )));
    }
    let b = bounds(world, layers);
    let step_x = (b.x1 - b.x0) / GRID as f64;
    let step_y = (b.y1 - b.y0) / GRID as f64;
    let values: Vec<Vec<f64>> = (0..=GRID)
        .map(|r| {
            (0..=GRID)
                .map(|c| world.log_density(&[b.x0 + c as f64 * step_x, b.y0 + r as f64 * step_y]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let top = values
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, "<title>{}</title>", escape(title));
    let _ = writeln!(
        svg,
        r##"<g fill="none" stroke="#9aa5b1" stroke-width="0.8">"##
    );
    for drop in LEVEL_DROPS {
        let mut d = String::new();
        for [p, q] in contour_segments(&values, top - drop) {
            let _ = write!(
                d,
                "M{:.2} {:.2}L{:.2} {:.2}",
                b.px(b.x0 + p.0 * step_x),
                b.py(b.y0 + p.1 * step_y),
                b.px(b.x0 + q.0 * step_x),
                b.py(b.y0 + q.1 * step_y)
            );
        }
        if !d.is_empty() {
            let _ = writeln!(svg, r#"<path d="{d}"/>"#);
        }
    }
    let _ = writeln!(svg, "</g>");

    for layer in layers {
        let _ = writeln!(
            svg,
            r#"<g id="{}" fill="{}">"#,
            escape(&layer.name),
            escape(&layer.color)
        );
        if layer.connect && layer.points.len() > 1 {
            let pts: Vec<String> = layer
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", b.px(p[0]), b.py(p[1])))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
                pts.join(" "),
                escape(&layer.color)
            );
        }
        for p in &layer.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{}"/>"#,
                b.px(p[0]),
                b.py(p[1]),
                layer.radius
            );
        }
        let _ = writeln!(svg, "</g>");
    }

    let mut y = MARGIN + 12.0;
    for layer in layers {
        let _ = writeln!(
            svg,
            r#"<text x="{:.0}" y="{y:.0}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            MARGIN + 4.0,
            escape(&layer.color),
            escape(&layer.name)
        );
        y += 16.0;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
