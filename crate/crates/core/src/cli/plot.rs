//! Static log-log SVG of error against mesh.

use std::fmt::Write as _;
use std::path::Path;

use super::ResultRow;

#[derive(Debug, Clone, PartialEq)]
pub enum PlotOutcome {
    Written,
    Skipped(String),
    NoRows,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

/// Least-squares slope of `log e` on `log h`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    sxy / sxx
}

pub fn series(rows: &[ResultRow]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    vec![
        ("err_Y_max_p", rows.iter().map(|r| (r.mesh, r.report.err_y_max_p)).collect()),
        ("err_Z_int_L2", rows.iter().map(|r| (r.mesh, r.report.err_z_int_l2)).collect()),
        ("err_max_joint_p", rows.iter().map(|r| (r.mesh, r.report.err_max_joint_p)).collect()),
    ]
}

/// Render the SVG document, or the reason it cannot be drawn.
pub fn render(rows: &[ResultRow]) -> Result<String, String> {
    let mut meshes: Vec<f64> = rows.iter().map(|r| r.mesh).collect();
    meshes.sort_by(f64::total_cmp);
    meshes.dedup();
    if meshes.len() < 2 {
        return Err(format!("plot needs at least 2 mesh levels, got {}", meshes.len()));
    }
    let all = series(rows);
    if let Some((name, _)) = all
        .iter()
        .find(|(_, pts)| pts.iter().any(|&(_, e)| !(e > 0.0) || !e.is_finite()))
    {
        return Err(format!("{name} has a zero or non-finite level"));
    }
    let lx = |h: f64| h.log10();
    let (x0, x1) = (lx(meshes[0]), lx(*meshes.last().unwrap()));
    let errs = all.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1.log10()));
    let (y0, y1) = errs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = if y1 - y0 < 1e-9 { (y0 - 0.5, y1 + 0.5) } else { (y0, y1) };
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |v: f64| LEFT + (v - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |v: f64| H - BOTTOM - (v - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (ax0, ax1, ay0, ay1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<path d="M{ax0} {ay0} L{ax0} {ay1} L{ax1} {ay1}" stroke="black" fill="none"/>"#
    );
    for d in (x0.floor() as i32)..=(x1.ceil() as i32) {
        let v = d as f64;
        if v < x0 - 1e-12 || v > x1 + 1e-12 {
            continue;
        }
        let x = px(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{ay1}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{d}</text>"#,
            ay1 + 5.0,
            ay1 + 18.0
        );
    }
    for d in (y0.floor() as i32)..=(y1.ceil() as i32) {
        let v = d as f64;
        if v < y0 || v > y1 {
            continue;
        }
        let y = py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{ax0}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"#,
            ax0 - 5.0,
            ax0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">mesh |π|</text>"#,
        0.5 * (ax0 + ax1),
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">error</text>"#,
        0.5 * (ay0 + ay1),
        0.5 * (ay0 + ay1)
    );

    for (k, (name, pts)) in all.iter().enumerate() {
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, &(h, e))| {
                format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, px(lx(h)), py(e.log10()))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        );
        for &(h, e) in &pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(lx(h)),
                py(e.log10())
            );
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{name} (slope {:.2})</text>"#,
            ax0 + 15.0,
            ax0 + 40.0,
            ax0 + 46.0,
            ly + 4.0,
            loglog_slope(&pts)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Write `plot.svg` into `dir`; no file is written for an empty row set or
/// when the data cannot be drawn on log axes.
pub fn emit_plot(rows: &[ResultRow], dir: &Path) -> std::io::Result<PlotOutcome> {
    if rows.is_empty() {
        return Ok(PlotOutcome::NoRows);
    }
    match render(rows) {
        Ok(svg) => {
            std::fs::write(dir.join("plot.svg"), svg)?;
            Ok(PlotOutcome::Written)
        }
        Err(reason) => Ok(PlotOutcome::Skipped(reason)),
    }
}
