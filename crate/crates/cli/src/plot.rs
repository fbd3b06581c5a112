//! Static SVG plots: root trajectory with joint-height strips, and loss curves.

use std::fmt::Write as _;

use ude_core::motion::MotionSequence;

use crate::artifacts::config_comment;
use crate::config::RunConfig;

const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn polyline(out: &mut String, points: &[(f64, f64)], color: &str) {
    out.push_str("<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"");
    out.push_str(color);
    out.push_str("\" points=\"");
    for (i, (x, y)) in points.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{x:.2},{y:.2}").unwrap();
    }
    out.push_str("\"/>\n");
}

fn header(width: u32, height: u32, config: &RunConfig) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    // the config goes into an XML comment; `--` is not allowed inside one
    s.push_str("<!--\n");
    s.push_str(&config_comment(config).replace("--", "- -"));
    s.push_str("-->\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s
}

/// Top-down root path (X/Z) on the left, per-joint height over time on the right.
pub fn motion_svg(m: &MotionSequence, title: &str, config: &RunConfig) -> String {
    let (w, h, pad) = (900.0, 400.0, 30.0);
    let mut s = header(w as u32, h as u32, config);
    writeln!(s, "<text x=\"{pad}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{}</text>", escape(title)).unwrap();

    let frames = m.frames();
    let root: Vec<[f64; 3]> = (0..frames).map(|t| m.joint(t, 0)).collect();
    let (x0, x1) = bounds(root.iter().map(|p| p[0]));
    let (z0, z1) = bounds(root.iter().map(|p| p[2]));
    let span = (x1 - x0).max(z1 - z0);
    let side = h - 2.0 * pad;
    let path: Vec<(f64, f64)> = root
        .iter()
        .map(|p| (pad + (p[0] - x0) / span * side, pad + (p[2] - z0) / span * side))
        .collect();
    writeln!(s, "<rect x=\"{pad}\" y=\"{pad}\" width=\"{side}\" height=\"{side}\" fill=\"none\" stroke=\"#ccc\"/>").unwrap();
    polyline(&mut s, &path, COLORS[0]);
    if let Some(&(x, y)) = path.first() {
        writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"green\"/>").unwrap();
    }

    let left = 2.0 * pad + side;
    let strip_w = w - left - pad;
    let joints = m.joints();
    let strip_h = side / joints as f64;
    let (y0, y1) = bounds(m.data().chunks_exact(3).map(|p| p[1]));
    for j in 0..joints {
        let top = pad + j as f64 * strip_h;
        writeln!(s, "<rect x=\"{left}\" y=\"{top:.2}\" width=\"{strip_w}\" height=\"{strip_h:.2}\" fill=\"none\" stroke=\"#eee\"/>").unwrap();
        let pts: Vec<(f64, f64)> = (0..frames)
            .map(|t| {
                let x = left + t as f64 / (frames.max(2) - 1) as f64 * strip_w;
                let y = top + strip_h - (m.joint(t, j)[1] - y0) / (y1 - y0) * strip_h;
                (x, y)
            })
            .collect();
        polyline(&mut s, &pts, COLORS[j % COLORS.len()]);
    }
    s.push_str("</svg>\n");
    s
}

/// One curve per column, shared y range.
pub fn loss_svg(columns: &[&str], rows: &[Vec<f64>], title: &str, config: &RunConfig) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let mut s = header(w as u32, h as u32, config);
    writeln!(s, "<text x=\"{pad}\" y=\"22\" font-family=\"sans-serif\" font-size=\"13\">{}</text>", escape(title)).unwrap();
    let (lo, hi) = bounds(rows.iter().flatten().copied().filter(|v| v.is_finite()));
    let n = rows.len();
    for (c, name) in columns.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let x = pad + if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 } * (w - 2.0 * pad);
                let y = h - pad - (r[c] - lo) / (hi - lo) * (h - 2.0 * pad);
                (x, y)
            })
            .collect();
        polyline(&mut s, &pts, COLORS[c % COLORS.len()]);
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>",
            w - pad - 80.0,
            pad + 14.0 * c as f64,
            COLORS[c % COLORS.len()],
            escape(name)
        )
        .unwrap();
    }
    writeln!(s, "<text x=\"4\" y=\"{pad}\" font-family=\"sans-serif\" font-size=\"10\">{hi:.4}</text>").unwrap();
    writeln!(s, "<text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.4}</text>", h - pad).unwrap();
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
