//! Closed-loop scenario runner and the mapping/racing mode machine.

use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use conetrack::ekf::{Estimator, Evaluation, SensorKind, StateCov, StateVector, VehicleState};
use conetrack::lidar::{detect_cones, DetectorConfig};
use conetrack::localize::{mcl_step, LocalizerState};
use conetrack::rng::{stream_id, tags, SeededRng};
use conetrack::sim::{
    generate_track, pure_pursuit, sense_lidar, step_vehicle, NavSensors, Track, TruthState, LIDAR_EVERY, TICK,
};
use conetrack::slam::{detect_loop_closure, ConeMap, FastSlam, Odometry};
use conetrack::{Error, Pose2};
use serde_json::{json, Value};

use crate::error::Result;
use crate::runlog::RunLog;
use crate::scenario::{Mode, Scenario};

/// Truth and estimate are logged every this many ticks (20 Hz).
pub const STATE_LOG_EVERY: u64 = 10;
/// Diagnostics are logged every this many ticks (1 Hz).
pub const DIAG_LOG_EVERY: u64 = 200;

const LIDAR_DT: f64 = LIDAR_EVERY as f64 * TICK;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged,
    TimedOut,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
            RunStatus::TimedOut => "timed_out",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: RunLog,
    pub track: Track,
    /// Last map logged: the frozen map in full mode, the final map in slam
    /// mode, the given map in localization mode.
    pub map: Option<ConeMap>,
    pub status: RunStatus,
    pub laps: u32,
}

enum Phase {
    Mapping { slam: FastSlam, trajectory: Vec<Pose2>, closed: bool },
    Localizing(Box<LocalizerState>),
}

pub fn load_track(sc: &Scenario) -> Result<Track> {
    match &sc.track.file {
        Some(path) => Ok(Track::read_csv(BufReader::new(File::open(path)?))?),
        None => Ok(generate_track(sc.track_seed(), sc.track.length, sc.track.width, sc.track.cone_spacing)?),
    }
}

fn load_map(sc: &Scenario, track: &Track) -> Result<ConeMap> {
    match &sc.localizer.map_file {
        Some(path) => Ok(ConeMap::read_csv(BufReader::new(File::open(path)?))?),
        None => Ok(ConeMap::from_points(track.cones().copied().collect())),
    }
}

fn xy(points: impl IntoIterator<Item = conetrack::Point2>) -> Value {
    Value::Array(points.into_iter().map(|p| json!([p.x, p.y])).collect())
}

fn map_event(map: &ConeMap) -> Value {
    json!({
        "cones": xy(map.cones.iter().copied()),
        "hits": map.hits,
        "source": map.source,
        "checksum": format!("{:016x}", map.checksum()),
    })
}

fn truth_vector(s: &TruthState) -> StateVector {
    StateVector::from_column_slice(&[s.pose.x, s.pose.y, s.pose.psi, s.vx, s.vy, s.r])
}

#[derive(Default, Clone, Copy)]
struct Counter {
    evaluated: u64,
    rejected: u64,
}

struct Runner<'a> {
    sc: &'a Scenario,
    log: RunLog,
    est: Estimator,
    counters: [Counter; 4],
}

impl Runner<'_> {
    fn record(&mut self, eval: Option<Evaluation>) {
        let Some(Evaluation { outcome, transition }) = eval else { return };
        let kind = outcome.kind;
        let c = &mut self.counters[kind.index()];
        c.evaluated += 1;
        if !outcome.accepted {
            c.rejected += 1;
        }
        // high-rate channels are logged only when something happens
        let always = matches!(kind, SensorKind::GpsPosition | SensorKind::VirtualPose);
        if always || !outcome.accepted || outcome.accepted != outcome.fused {
            self.log.push(
                outcome.t,
                "update",
                json!({
                    "sensor": kind.name(),
                    "accepted": outcome.accepted,
                    "fused": outcome.fused,
                    "d2": outcome.d2,
                    "innovation": outcome.innovation.as_slice(),
                }),
            );
        }
        if let Some(tr) = transition {
            self.log.push(
                outcome.t,
                "health",
                json!({"sensor": kind.name(), "from": tr.from.as_str(), "to": tr.to.as_str()}),
            );
        }
    }

    fn measure(&mut self, m: &conetrack::ekf::Measurement) -> Result<()> {
        let eval = self.est.measure(m)?;
        self.record(eval);
        Ok(())
    }

    fn diagnostics_event(&self) -> Value {
        let d = self.est.diagnostics();
        let mut obj = serde_json::Map::new();
        for (kind, status) in d.statuses {
            obj.insert(kind.name().to_string(), json!(status.as_str()));
        }
        obj.insert("position_trace".into(), json!(d.position_trace));
        obj.insert("divergence".into(), json!(d.divergence));
        Value::Object(obj)
    }

    fn counters_event(&self) -> Value {
        let mut obj = serde_json::Map::new();
        for kind in SensorKind::ALL {
            let c = self.counters[kind.index()];
            obj.insert(kind.name().to_string(), json!({"evaluated": c.evaluated, "rejected": c.rejected}));
        }
        Value::Object(obj)
    }

    fn new_localizer(&self, map: ConeMap, at: Pose2) -> Result<LocalizerState> {
        Ok(LocalizerState::new(self.sc.run.seed, Arc::new(map), at, self.sc.localizer_config())?)
    }
}

/// Steps the simulator until the requested laps are done, the estimator
/// diverges, or the time limit passes. A pure function of the scenario.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutput> {
    sc.validate()?;
    let track = load_track(sc)?;
    let seed = sc.run.seed;
    let params = sc.vehicle_params();
    let weather = sc.weather_profile();
    let lidar_cfg = sc.lidar_config();
    let detector = DetectorConfig::default();
    let cones: Vec<_> = track.cones().copied().collect();

    let start = Pose2::new(track.centerline[0].x, track.centerline[0].y, track.heading_at(0.0));
    let mut truth = TruthState { t: 0.0, pose: start, ..TruthState::default() };
    let p0 = StateCov::from_diagonal(&StateVector::from_column_slice(&[0.01, 0.01, 3e-4, 0.01, 0.01, 1e-3]));
    let est = Estimator::new(VehicleState::new(0.0, truth_vector(&truth), p0), sc.ekf_config());
    let mut nav = NavSensors::new(seed, sc.nav_noise(), weather);
    let mut lidar_rng = SeededRng::new(seed, stream_id(tags::LIDAR, 0, 0));

    let mut run = Runner { sc, log: RunLog::new(), est, counters: [Counter::default(); 4] };
    run.log.push(
        0.0,
        "start",
        json!({
            "mode": sc.run.mode.as_str(),
            "laps": sc.run.laps,
            "seed": seed,
            "track_seed": sc.track_seed(),
        }),
    );
    run.log.push(
        0.0,
        "track",
        json!({
            "length": track.length,
            "width": track.width,
            "left": xy(track.left.iter().copied()),
            "right": xy(track.right.iter().copied()),
        }),
    );

    let mut map_out = None;
    let mut phase = match sc.run.mode {
        Mode::Slam | Mode::Full => Phase::Mapping {
            slam: FastSlam::new(seed, start, sc.slam_config())?,
            trajectory: vec![start],
            closed: false,
        },
        Mode::Localization => {
            let map = load_map(sc, &track)?;
            run.log.push(0.0, "map", map_event(&map));
            let loc = run.new_localizer(map.clone(), start)?;
            map_out = Some(map);
            Phase::Localizing(Box::new(loc))
        }
    };
    let mut speed = match phase {
        Phase::Mapping { .. } => sc.vehicle.slam_speed,
        Phase::Localizing(_) => sc.vehicle.race_speed,
    };

    let mut odom = Odometry::default();
    let mut progress = 0.0;
    let mut last_s = track.project(&truth.pose.position()).0;
    let mut laps = 0u32;
    let mut status = RunStatus::Completed;
    let mut tick: u64 = 0;

    loop {
        let t = tick as f64 * TICK;
        if tick > 0 {
            let cmd = pure_pursuit(&truth, &track, sc.vehicle.lookahead_time, speed, &params);
            truth = step_vehicle(&truth, &cmd, TICK, &params)?;
            truth.t = t;
            let s = track.project(&truth.pose.position()).0;
            let mut ds = s - last_s;
            if ds > track.length / 2.0 {
                ds -= track.length;
            } else if ds < -track.length / 2.0 {
                ds += track.length;
            }
            progress += ds;
            last_s = s;
            if progress >= (laps + 1) as f64 * track.length {
                laps += 1;
                run.log.push(t, "lap", json!({"lap": laps}));
            }
        }

        let blackout = sc.sensors.blackout_after.is_some_and(|b| t >= b);
        nav.blackout = blackout;
        let sample = nav.sense(tick, &truth)?;
        if let Some(u) = sample.imu {
            run.est.imu(u)?;
        }
        for m in &sample.measurements {
            run.measure(m)?;
        }
        run.est.predict_to(t)?;
        let x = run.est.state().x;
        odom.accumulate(&Odometry { dx: x[3] * TICK, dy: x[4] * TICK, dpsi: x[5] * TICK });

        if tick.is_multiple_of(LIDAR_EVERY) && !blackout {
            let cloud = sense_lidar(&truth, &cones, &weather, &lidar_cfg, &mut lidar_rng);
            let obs = detect_cones(&cloud, &detector)?;
            run.log.push(
                t,
                "detections",
                json!({"cones": obs.iter().map(|o| json!([o.range, o.bearing])).collect::<Vec<_>>()}),
            );
            let mut switch_to = None;
            match &mut phase {
                Phase::Mapping { slam, trajectory, closed } => {
                    let step = slam.step(&odom, LIDAR_DT, &obs)?;
                    let b = step.best_pose;
                    run.log.push(
                        t,
                        "slam",
                        json!({
                            "n_eff": step.n_eff,
                            "resampled": step.resampled,
                            "landmarks": step.landmarks,
                            "best": [b.x, b.y, b.psi],
                        }),
                    );
                    trajectory.push(b);
                    let c = &slam.config;
                    if !*closed
                        && detect_loop_closure(trajectory, &start, c.min_travel, c.closure_radius, c.closure_heading)
                    {
                        *closed = true;
                        run.log.push(t, "loop_closure", json!({"best": [b.x, b.y, b.psi]}));
                        if sc.run.mode == Mode::Full {
                            let map = slam.extract_map()?;
                            run.log.push(t, "map", map_event(&map));
                            switch_to = Some(map);
                        }
                    }
                }
                Phase::Localizing(loc) => match mcl_step(loc, t, &odom, LIDAR_DT, &obs) {
                    Ok(vp) => {
                        let (pose, cov) = loc.estimate();
                        let w: Vec<f64> = loc.particles.iter().map(|p| p.log_weight.exp()).collect();
                        run.log.push(
                            t,
                            "mcl",
                            json!({
                                "pose": [pose.x, pose.y, pose.psi],
                                "sigma": [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()],
                                "n_eff": conetrack::slam::effective_sample_size(&w),
                            }),
                        );
                        run.measure(&vp)?;
                    }
                    Err(Error::LocalizationLost) => {
                        let at = run.est.state().pose();
                        loc.reinitialize(&at);
                        run.log.push(t, "localization_lost", json!({"resets": loc.resets}));
                    }
                    Err(e) => return Err(e.into()),
                },
            }
            if let Some(map) = switch_to {
                let loc = run.new_localizer(map.clone(), run.est.state().pose())?;
                phase = Phase::Localizing(Box::new(loc));
                map_out = Some(map);
                speed = sc.vehicle.race_speed;
                run.log.push(t, "mode", json!({"from": "slam", "to": "localization"}));
            }
            odom = Odometry::default();
        }

        if tick.is_multiple_of(STATE_LOG_EVERY) {
            let s = run.est.state();
            let x = s.x;
            run.log.push(
                t,
                "truth",
                json!({
                    "x": truth.pose.x, "y": truth.pose.y, "psi": truth.pose.psi,
                    "vx": truth.vx, "vy": truth.vy, "r": truth.r,
                }),
            );
            let nees = s.nees(&truth_vector(&truth));
            run.log.push(
                t,
                "estimate",
                json!({
                    "x": x[0], "y": x[1], "psi": x[2], "vx": x[3], "vy": x[4], "r": x[5],
                    "p_trace": s.position_trace(), "nees": nees,
                }),
            );
        }
        let diverged = run.est.diagnostics().divergence;
        if tick.is_multiple_of(DIAG_LOG_EVERY) || diverged {
            let d = run.diagnostics_event();
            run.log.push(t, "diagnostics", d);
        }
        if diverged {
            let d = run.est.diagnostics();
            run.log.push(
                t,
                "failure",
                json!({"reason": "divergence", "position_trace": d.position_trace, "laps": laps}),
            );
            status = RunStatus::Diverged;
            break;
        }
        if laps >= sc.run.laps {
            break;
        }
        if t >= sc.run.max_time {
            run.log.push(t, "failure", json!({"reason": "time limit", "laps": laps}));
            status = RunStatus::TimedOut;
            break;
        }
        tick += 1;
    }

    let t_end = tick as f64 * TICK;
    if let Phase::Mapping { slam, .. } = &phase {
        let map = slam.extract_map()?;
        run.log.push(t_end, "map", map_event(&map));
        map_out = Some(map);
    }
    let counters = run.counters_event();
    run.log.push(
        t_end,
        "end",
        json!({
            "status": status.as_str(),
            "laps": laps,
            "sensors": counters,
            "dropped": run.est.dropped(),
        }),
    );
    Ok(RunOutput { log: run.log, track, map: map_out, status, laps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(mode: Mode, laps: u32) -> Scenario {
        let mut sc = Scenario::default();
        sc.run.mode = mode;
        sc.run.laps = laps;
        sc.run.seed = 7;
        sc.slam.particles = 30;
        sc.localizer.particles = 50;
        sc
    }

    #[test]
    fn blackout_ends_the_run_with_a_failure_record() {
        let mut sc = scenario(Mode::Localization, 3);
        sc.sensors.blackout_after = Some(1.0);
        let out = run_scenario(&sc).unwrap();
        assert_eq!(out.status, RunStatus::Diverged);
        assert_eq!(out.log.channel("failure").count(), 1);
        let end = out.log.channel("end").next().unwrap();
        assert_eq!(end.data["status"], "diverged");
        assert!(end.t < 20.0, "terminated at {}", end.t);
        assert_eq!(out.laps, 0);
    }

    #[test]
    fn localization_lap_logs_in_order() {
        let out = run_scenario(&scenario(Mode::Localization, 1)).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        assert_eq!(out.log.channel("lap").count(), 1);
        assert_eq!(out.log.channel("mode").count(), 0);
        assert!(out.log.events.windows(2).all(|w| w[0].t <= w[1].t));
        assert_eq!(out.log.channel("truth").count(), out.log.channel("estimate").count());
        assert!(out.log.channel("mcl").count() > 100);
    }

    #[test]
    fn invalid_scenario_is_rejected_before_running() {
        let mut sc = scenario(Mode::Slam, 1);
        sc.run.laps = 0;
        assert!(run_scenario(&sc).unwrap_err().is_validation());
    }
}
