//! Hand-written SVG: class maps and heatmaps over the input square, with
//! slice outlines.

use std::fmt::Write as _;

use crate::datasets::{Region, EXTENT};

const SIZE: f64 = 400.0;

/// Centers of a `res × res` grid over the input square, row-major from the
/// top-left (high x2) corner.
pub fn grid_points(res: usize) -> Vec<[f64; 2]> {
    let step = 2.0 * EXTENT / res as f64;
    let mut out = Vec::with_capacity(res * res);
    for row in 0..res {
        let x2 = EXTENT - (row as f64 + 0.5) * step;
        for col in 0..res {
            out.push([-EXTENT + (col as f64 + 0.5) * step, x2]);
        }
    }
    out
}

fn to_px(x: [f64; 2]) -> (f64, f64) {
    (
        (x[0] + EXTENT) / (2.0 * EXTENT) * SIZE,
        (EXTENT - x[1]) / (2.0 * EXTENT) * SIZE,
    )
}

/// Runs of equal color per row become one rect each.
fn cells(out: &mut String, res: usize, color: impl Fn(usize) -> String) {
    let px = SIZE / res as f64;
    for row in 0..res {
        let mut start = 0;
        while start < res {
            let c = color(row * res + start);
            let mut end = start + 1;
            while end < res && color(row * res + end) == c {
                end += 1;
            }
            let _ = writeln!(
                out,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{c}"/>"#,
                start as f64 * px,
                row as f64 * px,
                (end - start) as f64 * px,
                px
            );
            start = end;
        }
    }
}

fn outlines(out: &mut String, regions: &[Region]) {
    let scale = SIZE / (2.0 * EXTENT);
    for r in regions {
        match *r {
            Region::Disc { cx, cy, r } => {
                let (x, y) = to_px([cx, cy]);
                let _ = writeln!(
                    out,
                    r#"<circle cx="{x:.3}" cy="{y:.3}" r="{:.3}" fill="none" stroke="black" stroke-width="1.5"/>"#,
                    r * scale
                );
            }
            Region::Rect { x0, y0, x1, y1 } => {
                let (x, y) = to_px([x0, y1]);
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.3}" y="{y:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="black" stroke-width="1.5"/>"#,
                    (x1 - x0) * scale,
                    (y1 - y0) * scale
                );
            }
        }
    }
}

fn document(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{h}\" viewBox=\"0 0 {SIZE} {h}\">\n\
         <title>{title}</title>\n{body}\
         <text x=\"4\" y=\"{ty}\" font-family=\"monospace\" font-size=\"12\">{title}</text>\n</svg>\n",
        h = SIZE + 20.0,
        ty = SIZE + 15.0,
    )
}

/// Predicted class per grid cell (`classes.len() == res²`).
pub fn decision_map(title: &str, res: usize, classes: &[u8], regions: &[Region]) -> String {
    let mut body = String::new();
    cells(&mut body, res, |i| {
        if classes[i] == 1 { "#e8846b" } else { "#6b9be8" }.to_string()
    });
    outlines(&mut body, regions);
    document(title, &body)
}

/// Values in [0, 1] per grid cell, quantized to 32 shades.
pub fn heatmap(title: &str, res: usize, values: &[f64], regions: &[Region]) -> String {
    let mut body = String::new();
    cells(&mut body, res, |i| {
        let v = (values[i].clamp(0.0, 1.0) * 31.0).round() / 31.0;
        let r = (255.0 * v).round() as u8;
        let b = (255.0 * (1.0 - v)).round() as u8;
        format!("#{r:02x}40{b:02x}")
    });
    outlines(&mut body, regions);
    document(title, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_square() {
        let g = grid_points(4);
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], [-0.75, 0.75]);
        assert_eq!(g[15], [0.75, -0.75]);
    }

    #[test]
    fn runs_are_merged() {
        let s = decision_map("t", 3, &[1, 1, 1, 0, 0, 1, 0, 0, 0], &[]);
        assert_eq!(s.matches("<rect").count(), 4);
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
    }
}
