//! Plot-ready CSVs and a static SVG of trajectory and map.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::runlog::{num, points, RunLog};

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const MAP_CSV: &str = "map.csv";
pub const NEES_CSV: &str = "nees.csv";
pub const REJECTIONS_CSV: &str = "rejections.csv";
pub const SVG: &str = "trajectory.svg";

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(header).map_err(csv_io)?;
    Ok(w)
}

fn csv_io(e: csv::Error) -> crate::error::HarnessError {
    std::io::Error::other(e.to_string()).into()
}

/// Writes the four CSVs and the SVG into `out_dir`, creating it if needed.
/// Returns the paths written.
pub fn emit_plots(log: &RunLog, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let truth: BTreeMap<i64, (f64, f64, f64)> = log
        .channel("truth")
        .map(|e| ((e.t / conetrack::sim::TICK).round() as i64, (num(&e.data["x"]), num(&e.data["y"]), num(&e.data["psi"]))))
        .collect();

    let path = out_dir.join(TRAJECTORY_CSV);
    let mut w = csv_writer(&path, &["t", "x", "y", "psi", "truth_x", "truth_y", "truth_psi"])?;
    let mut est_path = Vec::new();
    for e in log.channel("estimate") {
        let (x, y, psi) = (num(&e.data["x"]), num(&e.data["y"]), num(&e.data["psi"]));
        est_path.push((x, y));
        let g = truth.get(&((e.t / conetrack::sim::TICK).round() as i64));
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            e.t.to_string(),
            x.to_string(),
            y.to_string(),
            psi.to_string(),
            cell(g.map(|g| g.0)),
            cell(g.map(|g| g.1)),
            cell(g.map(|g| g.2)),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    let mut written = vec![path];

    let (mut true_cones, mut map_cones) = (Vec::new(), Vec::new());
    if let Some(tr) = log.channel("track").next() {
        true_cones.extend(points(&tr.data["left"]));
        true_cones.extend(points(&tr.data["right"]));
    }
    if let Some(m) = log.channel("map").last() {
        map_cones = points(&m.data["cones"]);
    }
    let path = out_dir.join(MAP_CSV);
    let mut w = csv_writer(&path, &["kind", "x", "y"])?;
    for (kind, pts) in [("truth", &true_cones), ("map", &map_cones)] {
        for (x, y) in pts.iter() {
            w.write_record([kind.to_string(), x.to_string(), y.to_string()]).map_err(csv_io)?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join(NEES_CSV);
    let mut w = csv_writer(&path, &["t", "nees"])?;
    for e in log.channel("estimate") {
        w.write_record([e.t.to_string(), num(&e.data["nees"]).to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join(REJECTIONS_CSV);
    let mut w = csv_writer(&path, &["t", "sensor", "accepted", "fused", "d2"])?;
    for e in log.channel("update") {
        w.write_record([
            e.t.to_string(),
            e.data["sensor"].as_str().unwrap_or("").to_string(),
            e.data["accepted"].to_string(),
            e.data["fused"].to_string(),
            num(&e.data["d2"]).to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    written.push(path);

    let true_path: Vec<(f64, f64)> = truth.values().map(|g| (g.0, g.1)).collect();
    let path = out_dir.join(SVG);
    fs::write(&path, render_svg(&true_path, &est_path, &true_cones, &map_cones))?;
    written.push(path);
    Ok(written)
}

/// World x right, y up; the view box is in flipped coordinates (x, −y).
pub fn render_svg(truth: &[(f64, f64)], estimate: &[(f64, f64)], cones: &[(f64, f64)], map: &[(f64, f64)]) -> String {
    let all = truth.iter().chain(estimate).chain(cones).chain(map).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(-y);
        y1 = y1.max(-y);
    }
    let mut s = String::new();
    if !x0.is_finite() {
        s.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\"></svg>\n");
        return s;
    }
    let pad = 2.0;
    let (vx, vy, vw, vh) = (x0 - pad, y0 - pad, x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{vx} {vy} {vw} {vh}\">");
    let poly = |s: &mut String, pts: &[(f64, f64)], color: &str| {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{:.3}", -y)).collect();
        let _ = writeln!(
            s,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"0.15\" points=\"{}\"/>",
            coords.join(" ")
        );
    };
    poly(&mut s, truth, "black");
    poly(&mut s, estimate, "royalblue");
    for (x, y) in cones {
        let _ = writeln!(s, "  <circle class=\"cone\" cx=\"{x}\" cy=\"{}\" r=\"0.3\" fill=\"orange\"/>", -y);
    }
    for (x, y) in map {
        let _ = writeln!(
            s,
            "  <circle class=\"map\" cx=\"{x}\" cy=\"{}\" r=\"0.4\" fill=\"none\" stroke=\"crimson\" stroke-width=\"0.1\"/>",
            -y
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn view_box(svg: &str) -> [f64; 4] {
        let start = svg.find("viewBox=\"").unwrap() + 9;
        let end = start + svg[start..].find('"').unwrap();
        let v: Vec<f64> = svg[start..end].split(' ').map(|x| x.parse().unwrap()).collect();
        [v[0], v[1], v[2], v[3]]
    }

    #[test]
    fn empty_log_gives_headers_and_empty_svg() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&RunLog::new(), dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        for (name, header) in [
            (TRAJECTORY_CSV, "t,x,y,psi,truth_x,truth_y,truth_psi"),
            (MAP_CSV, "kind,x,y"),
            (NEES_CSV, "t,nees"),
            (REJECTIONS_CSV, "t,sensor,accepted,fused,d2"),
        ] {
            assert_eq!(fs::read_to_string(dir.path().join(name)).unwrap(), format!("{header}\n"));
        }
        let svg = fs::read_to_string(dir.path().join(SVG)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<circle") && !svg.contains("<polyline"));
    }

    #[test]
    fn rows_follow_estimates_and_box_holds_cones() {
        let mut log = RunLog::new();
        let left = vec![json!([-30.0, 12.5]), json!([40.0, -7.0])];
        let right = vec![json!([5.0, 55.0])];
        log.push(0.0, "track", json!({"left": left, "right": right}));
        for k in 0..7 {
            let t = k as f64 * 0.05;
            log.push(t, "truth", json!({"x": k as f64, "y": 0.0, "psi": 0.0}));
            log.push(t, "estimate", json!({"x": k as f64 + 0.1, "y": 0.0, "psi": 0.0, "nees": 5.0}));
        }
        let dir = tempfile::tempdir().unwrap();
        emit_plots(&log, dir.path()).unwrap();
        let traj = fs::read_to_string(dir.path().join(TRAJECTORY_CSV)).unwrap();
        assert_eq!(traj.lines().count() - 1, log.channel("estimate").count());
        let svg = fs::read_to_string(dir.path().join(SVG)).unwrap();
        let [vx, vy, vw, vh] = view_box(&svg);
        for (x, y) in [(-30.0, 12.5), (40.0, -7.0), (5.0, 55.0)] {
            assert!(x >= vx && x <= vx + vw, "x {x}");
            assert!(-y >= vy && -y <= vy + vh, "y {y}");
        }
        assert_eq!(svg.matches("class=\"cone\"").count(), 3);
    }

    #[test]
    fn unwritable_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, "x").unwrap();
        assert!(emit_plots(&RunLog::new(), &file).is_err());
    }
}
