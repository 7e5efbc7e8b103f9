//! Scoring a run log against the true track.

use std::collections::BTreeMap;

use conetrack::geometry::wrap;
use conetrack::rangebearing::backproject;
use conetrack::sim::{Track, TICK};
use conetrack::{Point2, Pose2};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::runlog::{num, points, Event, RunLog};

/// Map cones and detections further than this from any true cone are false
/// positives.
pub const MATCH_RADIUS: f64 = 1.0;
/// Detection recall counts true cones within this range of the vehicle.
pub const RECALL_RANGE: f64 = 10.0;

/// Undefined quantities (no map, no closure, no samples) are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_rmse: Option<f64>,
    pub heading_rmse: Option<f64>,
    pub ate_slam_phase: Option<f64>,
    pub ate_localization_phase: Option<f64>,
    pub ate_final_lap: Option<f64>,
    pub landmark_rmse: Option<f64>,
    pub map_precision: Option<f64>,
    pub map_recall: Option<f64>,
    pub detection_precision: Option<f64>,
    pub detection_recall: Option<f64>,
    pub mean_nees: Option<f64>,
    pub laps_completed: u32,
    pub laps_requested: u32,
    pub loop_closure_time: Option<f64>,
    pub mode_transitions: u32,
    pub rejection_rate_gps: Option<f64>,
    pub rejection_rate_velocity: Option<f64>,
    pub rejection_rate_yaw_rate: Option<f64>,
    pub rejection_rate_virtual_pose: Option<f64>,
    pub diverged: bool,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Greedy one-to-one matching, closest pairs first, within `radius`.
/// Returns (estimate index, truth index, distance).
pub fn match_points(est: &[Point2], truth: &[Point2], radius: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, e) in est.iter().enumerate() {
        for (j, g) in truth.iter().enumerate() {
            let d = (e - g).norm();
            if d <= radius {
                pairs.push((i, j, d));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut used_e, mut used_t) = (vec![false; est.len()], vec![false; truth.len()]);
    let mut out = Vec::new();
    for (i, j, d) in pairs {
        if !used_e[i] && !used_t[j] {
            used_e[i] = true;
            used_t[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

fn tick_of(t: f64) -> i64 {
    (t / TICK).round() as i64
}

fn pose_of(e: &Event) -> Pose2 {
    Pose2 { x: num(&e.data["x"]), y: num(&e.data["y"]), psi: num(&e.data["psi"]) }
}

#[derive(Default)]
struct Rmse {
    sum: f64,
    n: usize,
}

impl Rmse {
    fn add(&mut self, sq: f64) {
        self.sum += sq;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.sum / self.n as f64).sqrt())
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores `log` against `track`. Estimates are matched to truth records at
/// the same tick.
pub fn evaluate(log: &RunLog, track: &Track) -> Result<Metrics> {
    let truth: BTreeMap<i64, Pose2> = log.channel("truth").map(|e| (tick_of(e.t), pose_of(e))).collect();
    if truth.is_empty() {
        return Err(HarnessError::MissingChannel("truth"));
    }

    let start_mode = log.channel("start").next().and_then(|e| e.data["mode"].as_str().map(str::to_string));
    let transition = log.channel("mode").next().map(|e| e.t);
    let lap_times: Vec<f64> = log.channel("lap").map(|e| e.t).collect();
    let final_lap = lap_times.last().map(|&end| {
        let begin = if lap_times.len() >= 2 { lap_times[lap_times.len() - 2] } else { 0.0 };
        (begin, end)
    });

    let (mut ate, mut heading, mut slam_ate, mut loc_ate, mut lap_ate) =
        (Rmse::default(), Rmse::default(), Rmse::default(), Rmse::default(), Rmse::default());
    let (mut nees_sum, mut nees_n) = (0.0, 0usize);
    for e in log.channel("estimate") {
        let Some(g) = truth.get(&tick_of(e.t)) else { continue };
        let p = pose_of(e);
        let sq = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        ate.add(sq);
        heading.add(wrap(p.psi - g.psi).powi(2));
        let localizing = match transition {
            Some(tt) => e.t >= tt,
            None => start_mode.as_deref() == Some("localization"),
        };
        if localizing {
            loc_ate.add(sq);
        } else {
            slam_ate.add(sq);
        }
        if final_lap.is_some_and(|(a, b)| e.t > a && e.t <= b) {
            lap_ate.add(sq);
        }
        let n = num(&e.data["nees"]);
        if n.is_finite() {
            nees_sum += n;
            nees_n += 1;
        }
    }

    let true_cones: Vec<Point2> = track.cones().copied().collect();
    let (mut landmark_rmse, mut map_precision, mut map_recall) = (None, None, None);
    if let Some(m) = log.channel("map").last() {
        let cones: Vec<Point2> = points(&m.data["cones"]).into_iter().map(|(x, y)| Point2::new(x, y)).collect();
        let matched = match_points(&cones, &true_cones, MATCH_RADIUS);
        let mut r = Rmse::default();
        for (_, _, d) in &matched {
            r.add(d * d);
        }
        landmark_rmse = r.get();
        map_precision = ratio(matched.len(), cones.len());
        map_recall = ratio(matched.len(), true_cones.len());
    }

    let (mut det_tp, mut det_n, mut rec_tp, mut rec_n) = (0, 0, 0, 0);
    for e in log.channel("detections") {
        let Some(g) = truth.get(&tick_of(e.t)) else { continue };
        let dets: Vec<Point2> = points(&e.data["cones"]).into_iter().map(|(r, b)| backproject(g, r, b)).collect();
        let matched = match_points(&dets, &true_cones, MATCH_RADIUS);
        det_tp += matched.len();
        det_n += dets.len();
        let near: Vec<usize> = (0..true_cones.len())
            .filter(|&j| (true_cones[j] - g.position()).norm() <= RECALL_RANGE)
            .collect();
        rec_n += near.len();
        rec_tp += matched.iter().filter(|(_, j, _)| near.contains(j)).count();
    }

    let end = log.channel("end").last();
    let rate = |name: &str| {
        let s = &end?.data["sensors"][name];
        let ev = s["evaluated"].as_u64()?;
        let rj = s["rejected"].as_u64()?;
        ratio(rj as usize, ev as usize)
    };
    let laps_requested = log
        .channel("start")
        .next()
        .and_then(|e| e.data["laps"].as_u64())
        .unwrap_or(0) as u32;

    Ok(Metrics {
        ate_rmse: ate.get(),
        heading_rmse: heading.get(),
        ate_slam_phase: slam_ate.get(),
        ate_localization_phase: loc_ate.get(),
        ate_final_lap: lap_ate.get(),
        landmark_rmse,
        map_precision,
        map_recall,
        detection_precision: ratio(det_tp, det_n),
        detection_recall: ratio(rec_tp, rec_n),
        mean_nees: (nees_n > 0).then(|| nees_sum / nees_n as f64),
        laps_completed: log.channel("lap").count() as u32,
        laps_requested,
        loop_closure_time: log.channel("loop_closure").next().map(|e| e.t),
        mode_transitions: log.channel("mode").count() as u32,
        rejection_rate_gps: rate("gps"),
        rejection_rate_velocity: rate("velocity"),
        rejection_rate_yaw_rate: rate("yaw_rate"),
        rejection_rate_virtual_pose: rate("virtual_pose"),
        diverged: log.channel("failure").any(|e| e.data["reason"] == "divergence"),
    })
}
