use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::metrics::{iou_success_curve, joint_success_surface, PairErrors, ROT_STEP_DEG, TRANS_STEP_CM};

const W: f64 = 960.0;
const H: f64 = 460.0;
const PANEL: f64 = 360.0;
const TOP: f64 = 40.0;
const LEFT: [f64; 2] = [70.0, 560.0];
const THETA_MAX: f64 = 10.0;
const DELTA_MAX: f64 = 5.0;
const LEVELS: [(f64, &str); 3] = [(0.25, "2 4"), (0.5, ""), (0.75, "8 3")];
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Per-pair errors are stored next to a report as `NAME.errors.json`.
pub fn errors_path(report: &Path) -> PathBuf {
    report.with_extension("errors.json")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Panel coordinates to SVG coordinates, with `(u, v)` in `[0, 1]²`.
fn at(panel: usize, u: f64, v: f64) -> (f64, f64) {
    (LEFT[panel] + u * PANEL, TOP + (1.0 - v) * PANEL)
}

fn axes(svg: &mut String, panel: usize, title: &str, xlabel: &str, ylabel: &str, xmax: f64, ymax: f64) {
    let (x0, y0) = at(panel, 0.0, 0.0);
    let _ = write!(
        svg,
        r##"<rect x="{x0}" y="{TOP}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (x, _) = at(panel, f, 0.0);
        let (_, y) = at(panel, 0.0, f);
        let _ = write!(
            svg,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="#444"/><text x="{x}" y="{}" font-size="11" text-anchor="middle">{}</text>"##,
            y0 + 4.0,
            y0 + 16.0,
            fmt_tick(f * xmax)
        );
        let _ = write!(
            svg,
            r##"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="#444"/><text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"##,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0,
            fmt_tick(f * ymax)
        );
    }
    let cx = LEFT[panel] + PANEL / 2.0;
    let _ = write!(
        svg,
        r#"<text x="{cx}" y="{}" font-size="14" text-anchor="middle">{}</text><text x="{cx}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        TOP - 12.0,
        esc(title),
        y0 + 34.0,
        esc(xlabel)
    );
    let (ly, lx) = (TOP + PANEL / 2.0, x0 - 44.0);
    let _ = write!(
        svg,
        r#"<text x="{lx}" y="{ly}" font-size="12" text-anchor="middle" transform="rotate(-90 {lx} {ly})">{}</text>"#,
        esc(ylabel)
    );
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Iso-line segments of `grid` (rows along u, columns along v, unit square)
/// at `level`, by marching squares with linear interpolation.
fn contour(grid: &[Vec<f64>], level: f64) -> Vec<[(f64, f64); 2]> {
    let (nu, nv) = (grid.len(), grid[0].len());
    let mut segs = Vec::new();
    if nu < 2 || nv < 2 {
        return segs;
    }
    let (du, dv) = (1.0 / (nu - 1) as f64, 1.0 / (nv - 1) as f64);
    for i in 0..nu - 1 {
        for j in 0..nv - 1 {
            // corners counter-clockwise from (i, j)
            let c = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let mut pts = Vec::with_capacity(4);
            for k in 0..4 {
                let (a, b) = (c[k], c[(k + 1) % 4]);
                let (va, vb) = (grid[a.0][a.1], grid[b.0][b.1]);
                if (va >= level) != (vb >= level) {
                    let t = (level - va) / (vb - va);
                    let u = (a.0 as f64 + t * (b.0 as f64 - a.0 as f64)) * du;
                    let v = (a.1 as f64 + t * (b.1 as f64 - a.1 as f64)) * dv;
                    pts.push((u, v));
                }
            }
            for pair in pts.chunks_exact(2) {
                segs.push([pair[0], pair[1]]);
            }
        }
    }
    segs
}

/// Self-contained SVG: IoU success curves on the left, joint success
/// contours on the right, one color per named entry.
pub fn render_svg(entries: &[(String, PairErrors)]) -> String {
    let mut svg = String::new();
    let legend_h = 22.0 * entries.len() as f64;
    let height = H + legend_h;
    let _ = write!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?><svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>"#
    );
    axes(&mut svg, 0, "IoU success curve A(τ)", "IoU threshold τ", "success rate", 1.0, 1.0);
    axes(&mut svg, 1, "joint success S(θ, δ): contours 0.25 / 0.5 / 0.75", "rotation θ (deg)", "translation δ (cm)", THETA_MAX, DELTA_MAX);
    for (n, (name, errs)) in entries.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let pts: Vec<String> = iou_success_curve(&errs.ious, 1.0)
            .iter()
            .map(|(t, a)| {
                let (x, y) = at(0, *t, *a);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = write!(
            svg,
            r#"<polyline class="curve" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let grid = joint_success_surface(&errs.rot_deg, &errs.trans_cm, THETA_MAX, DELTA_MAX);
        debug_assert_eq!(grid.len(), (THETA_MAX / ROT_STEP_DEG) as usize + 1);
        debug_assert_eq!(grid[0].len(), (DELTA_MAX / TRANS_STEP_CM).round() as usize + 1);
        for (level, dash) in LEVELS {
            let mut d = String::new();
            for [a, b] in contour(&grid, level) {
                let (x1, y1) = at(1, a.0, a.1);
                let (x2, y2) = at(1, b.0, b.1);
                let _ = write!(d, "M{x1:.2},{y1:.2}L{x2:.2},{y2:.2}");
            }
            if !d.is_empty() {
                let _ = write!(
                    svg,
                    r#"<path class="contour" fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="{dash}" d="{d}"/>"#
                );
            }
        }
        let y = H - 20.0 + 22.0 * n as f64;
        let _ = write!(
            svg,
            r#"<g class="legend"><line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}" font-size="12">{}</text></g>"#,
            LEFT[0],
            LEFT[0] + 30.0,
            LEFT[0] + 38.0,
            y + 4.0,
            esc(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
