use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{align, associate, AlignMode, EvalError, MetricReport, Trajectory};
use crate::geometry::Point3;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), EvalError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn metrics_csv(report: &MetricReport) -> String {
    let rows = [
        ("ate_rmse", report.ate_rmse),
        ("rpe_trans_percent", report.rpe_trans),
        ("rpe_rot_deg_per_m", report.rpe_rot),
        ("alignment_scale", report.alignment.scale()),
        ("pairs", report.pairs as f64),
        ("rpe_fell_back", if report.rpe_fell_back { 1.0 } else { 0.0 }),
    ];
    let mut out = String::from("metric,value\n");
    for (name, value) in rows {
        let _ = writeln!(out, "{name},{value:?}");
    }
    out
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<(String, f64)>, EvalError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| EvalError::Parse { path: path.to_path_buf(), line: n + 1, message: message.into() };
        let (name, value) = line.split_once(',').ok_or_else(|| err("expected metric,value"))?;
        let value: f64 = value.trim().parse().map_err(|_| err("value is not a number"))?;
        rows.push((name.to_string(), value));
    }
    Ok(rows)
}

/// Indices of the two coordinate axes with the largest extent.
fn planar_axes(points: &[Point3]) -> (usize, usize) {
    let mut ext: Vec<(usize, f64)> = (0..3)
        .map(|a| {
            let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[a]), h.max(p[a])));
            (a, hi - lo)
        })
        .collect();
    ext.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let (a, b) = (ext[0].0.min(ext[1].0), ext[0].0.max(ext[1].0));
    (a, b)
}

/// SVG with the aligned estimate and the ground truth as two polylines.
pub fn render_svg(est: &[(f64, f64)], gt: &[(f64, f64)]) -> String {
    let all = est.iter().chain(gt);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, y0, x1, y1) = (0.0, 0.0, 1.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let (size, pad) = (600.0, 20.0);
    let map = |(x, y): (f64, f64)| (pad + (x - x0) / span * size, pad + size - (y - y0) / span * size);
    let points = |pts: &[(f64, f64)]| {
        pts.iter()
            .map(|&p| {
                let (u, v) = map(p);
                format!("{u:.3},{v:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let dim = size + 2.0 * pad;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{dim}" height="{dim}" viewBox="0 0 {dim} {dim}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#, points(gt));
    let _ = writeln!(s, r#"<polyline fill="none" stroke="red" stroke-width="1.5" points="{}"/>"#, points(est));
    let _ = writeln!(s, r#"<text x="{pad}" y="14" font-size="12" fill="black">ground truth</text>"#);
    let _ = writeln!(s, r#"<text x="{}" y="14" font-size="12" fill="red">estimate</text>"#, pad + 100.0);
    s.push_str("</svg>\n");
    s
}

/// Writes metrics.csv, trajectory_xy.csv and trajectory.svg into `dir`.
/// Nothing is written when the inputs cannot be evaluated.
pub fn emit_report(
    dir: &Path,
    est: &Trajectory,
    gt: &Trajectory,
    report: &MetricReport,
    max_dt: f64,
) -> Result<Vec<PathBuf>, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let pairs = associate(est, gt, max_dt)?;
    let alignment = if pairs.len() >= 3 { report.alignment } else { align(est, gt, &pairs, AlignMode::Se3)? };
    let e: Vec<Point3> = pairs.iter().map(|&(i, _)| alignment.transform(&est.samples()[i].1.translation())).collect();
    let g: Vec<Point3> = pairs.iter().map(|&(_, j)| gt.samples()[j].1.translation()).collect();
    let (a, b) = planar_axes(&g);
    let mut xy = String::from("timestamp,est_x,est_y,gt_x,gt_y\n");
    for (k, &(i, _)) in pairs.iter().enumerate() {
        let _ = writeln!(xy, "{:?},{:?},{:?},{:?},{:?}", est.samples()[i].0, e[k][a], e[k][b], g[k][a], g[k][b]);
    }
    let flat = |v: &[Point3]| v.iter().map(|p| (p[a], p[b])).collect::<Vec<_>>();
    let svg = render_svg(&flat(&e), &flat(&g));

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let out = [
        (dir.join("metrics.csv"), metrics_csv(report)),
        (dir.join("trajectory_xy.csv"), xy),
        (dir.join("trajectory.svg"), svg),
    ];
    for (path, body) in &out {
        write_atomic(path, body)?;
    }
    Ok(out.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, EvalConfig};
    use crate::geometry::{Pose, Vec3};

    fn circle(n: usize, bump: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    let a = k as f64 / n as f64 * std::f64::consts::TAU;
                    (k as f64 * 0.1, Pose::from_translation(Vec3::new(a.cos() + bump * a.sin(), 0.0, a.sin())))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let gt = circle(40, 0.0);
        let est = circle(40, 0.013);
        let report = evaluate(&est, &gt, &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &est, &gt, &report, 0.02).unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = parse_metrics_csv(&fs::read_to_string(&path).unwrap(), &path).unwrap();
        let get = |n: &str| rows.iter().find(|r| r.0 == n).unwrap().1;
        assert_eq!(get("ate_rmse"), report.ate_rmse);
        assert_eq!(get("rpe_trans_percent"), report.rpe_trans);
        assert_eq!(get("rpe_rot_deg_per_m"), report.rpe_rot);
    }

    #[test]
    fn svg_has_two_polylines_and_xy_uses_dominant_plane() {
        let gt = circle(30, 0.0);
        let report = evaluate(&gt, &gt, &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &gt, &gt, &report, 0.02).unwrap();
        let svg = fs::read_to_string(dir.path().join("trajectory.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let xy = fs::read_to_string(dir.path().join("trajectory_xy.csv")).unwrap();
        assert_eq!(xy.lines().count(), 31);
        let row: Vec<f64> = xy.lines().nth(8).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        // x and z are the dominant axes of the circle
        assert!((row[3] - gt.samples()[7].1.translation().x).abs() < 1e-12);
        assert!((row[4] - gt.samples()[7].1.translation().z).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_writes_nothing() {
        let gt = circle(10, 0.0);
        let report = evaluate(&gt, &gt, &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let empty = Trajectory::new(Vec::new()).unwrap();
        assert!(matches!(emit_report(&out, &empty, &gt, &report, 0.02), Err(EvalError::Empty)));
        assert!(!out.exists());
    }
}
