//! Declarative experiment configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! and out-of-range values are rejected together, one message per key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use conetrack::ekf::{EkfConfig, HealthConfig, ProcessNoise};
use conetrack::localize::LocalizerConfig;
use conetrack::sim::{min_turn_radius, LidarSimConfig, NavNoise, VehicleParams, WeatherProfile};
use conetrack::slam::SlamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Map only, at mapping speed.
    Slam,
    /// Race on a known map from the first tick.
    Localization,
    /// Map until loop closure, then freeze the map and race.
    Full,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Slam => "slam",
            Mode::Localization => "localization",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "slam" => Ok(Mode::Slam),
            "localization" => Ok(Mode::Localization),
            "full" => Ok(Mode::Full),
            other => Err(format!("unknown mode `{other}` (slam, localization, full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackSection {
    /// Generator seed; defaults to `run.seed`.
    pub seed: Option<u64>,
    /// Centerline length, m. Default 300, range [100, 500].
    pub length: f64,
    /// Default 3.5, range [2, 6].
    pub width: f64,
    /// Default 5, range [1, 10].
    pub cone_spacing: f64,
    /// Track CSV to load instead of generating one. Relative paths resolve
    /// against the config file's directory.
    pub file: Option<PathBuf>,
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection { seed: None, length: 300.0, width: 3.5, cone_spacing: 5.0, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleSection {
    /// m. Default 1.53, range (0, 5].
    pub wheelbase: f64,
    /// rad. Default 0.5, range (0, 1.2].
    pub max_steer: f64,
    /// Speed response time constant, s. Default 0.5, range (0, 10].
    pub speed_tau: f64,
    /// Pure-pursuit lookahead in seconds of travel. Default 2, range (0, 5].
    pub lookahead_time: f64,
    /// m. Default 3, range (0, 20].
    pub min_lookahead: f64,
    /// Target speed while mapping, m/s. Default 5, range (0, 40].
    pub slam_speed: f64,
    /// Target speed while localizing, m/s. Default 15, range (0, 40].
    pub race_speed: f64,
}

impl Default for VehicleSection {
    fn default() -> Self {
        let p = VehicleParams::default();
        VehicleSection {
            wheelbase: p.wheelbase,
            max_steer: p.max_steer,
            speed_tau: p.speed_tau,
            lookahead_time: 2.0,
            min_lookahead: p.min_lookahead,
            slam_speed: 5.0,
            race_speed: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorsSection {
    /// m. Default 0.15, range [0, 10].
    pub gps_sigma: f64,
    /// m/s. Default 0.05, range [0, 5].
    pub velocity_sigma: f64,
    /// rad/s. Default 0.01, range [0, 1].
    pub gyro_sigma: f64,
    /// m/s². Default 0.1, range [0, 10].
    pub accel_sigma: f64,
    /// LiDAR point noise, m. Default 0.02, range [0, 0.2].
    pub point_sigma: f64,
    /// m. Default 12, range (0, 100].
    pub lidar_range: f64,
    /// Drop every sensor from this time on, s. Unset by default.
    pub blackout_after: Option<f64>,
}

impl Default for SensorsSection {
    fn default() -> Self {
        let n = NavNoise::default();
        let l = LidarSimConfig::default();
        SensorsSection {
            gps_sigma: n.gps,
            velocity_sigma: n.velocity,
            gyro_sigma: n.gyro,
            accel_sigma: n.accel,
            point_sigma: l.point_sigma,
            lidar_range: l.max_range,
            blackout_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherSection {
    /// Default 1, range (0, 1].
    pub lidar_range_factor: f64,
    /// Mean clutter points per scan. Default 0, range [0, 100].
    pub clutter_rate: f64,
    /// Probability of losing a GPS fix. Default 0, range [0, 1].
    pub gps_dropout: f64,
    /// m/s. Default 0, range [0, 10].
    pub gps_bias_rate: f64,
    /// s. Default 0, range [0, ∞).
    pub gps_bias_start: f64,
    /// rad. Default π/4, any finite value.
    pub gps_bias_direction: f64,
}

impl Default for WeatherSection {
    fn default() -> Self {
        let w = WeatherProfile::default();
        WeatherSection {
            lidar_range_factor: w.lidar_range_factor,
            clutter_rate: w.clutter_rate,
            gps_dropout: w.gps_dropout,
            gps_bias_rate: w.gps_bias_rate,
            gps_bias_start: w.gps_bias_start,
            gps_bias_direction: w.gps_bias_direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfSection {
    /// Default 0.99, range (0, 1).
    pub gate_p: f64,
    /// Gating and health tracking. Default true.
    pub fault_detection: bool,
    /// Health window length. Default 50, range [1, 10000].
    pub window: usize,
    /// Default 0.5, range (0, 1].
    pub reject_fraction: f64,
    /// Consecutive accepts to recover. Default 20, range [1, 10000].
    pub recovery: usize,
    /// Position covariance trace flagged as divergence, m². Default 25,
    /// range (0, ∞).
    pub divergence_trace: f64,
    /// Continuous process noise intensities for px, py, ψ, vx, vy, r.
    /// Default [0, 0, 0, 0.25, 0.25, 0.09], each ≥ 0.
    pub process_noise: [f64; 6],
}

impl Default for EkfSection {
    fn default() -> Self {
        let c = EkfConfig::default();
        EkfSection {
            gate_p: c.gate_p,
            fault_detection: c.fault_detection,
            window: c.health.window,
            reject_fraction: c.health.reject_fraction,
            recovery: c.health.recovery,
            divergence_trace: c.divergence_trace,
            process_noise: c.q.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamSection {
    /// Default 200, range [1, 5000].
    pub particles: usize,
    /// Default 0.99, range (0, 1).
    pub gate_p: f64,
    /// Default 1e-4, range (0, 1].
    pub new_landmark_likelihood: f64,
    /// Observations needed for a landmark to enter the map. Default 3,
    /// range [1, 1000].
    pub min_hits: u32,
    /// m. Default 0.5, range [0, 5].
    pub merge_dist: f64,
    /// Multiplier on the motion noise. Default 1, range (0, 100].
    pub noise_scale: f64,
    /// Path length before loop closure is considered, m. Default 50,
    /// range (0, ∞).
    pub min_travel: f64,
    /// m. Default 3, range (0, 50].
    pub closure_radius: f64,
    /// rad. Default π/4, range (0, π].
    pub closure_heading: f64,
}

impl Default for SlamSection {
    fn default() -> Self {
        let c = SlamConfig::default();
        SlamSection {
            particles: c.particles,
            gate_p: c.gate_p,
            new_landmark_likelihood: c.new_landmark_likelihood,
            min_hits: c.min_hits,
            merge_dist: c.merge_dist,
            noise_scale: c.noise_scale,
            min_travel: c.min_travel,
            closure_radius: c.closure_radius,
            closure_heading: c.closure_heading,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerSection {
    /// Default 200, range [1, 5000].
    pub particles: usize,
    /// Default 0.99, range (0, 1).
    pub gate_p: f64,
    /// Default 1e-4, range (0, 1].
    pub new_feature_likelihood: f64,
    /// m. Default 0.1, range [0, 2].
    pub map_sigma: f64,
    /// Default 1, range (0, 100].
    pub noise_scale: f64,
    /// Map CSV (`x,y,hits`) for localization mode; the true cones are used
    /// when unset. Relative paths resolve like `track.file`.
    pub map_file: Option<PathBuf>,
}

impl Default for LocalizerSection {
    fn default() -> Self {
        let c = LocalizerConfig::default();
        LocalizerSection {
            particles: c.particles,
            gate_p: c.gate_p,
            new_feature_likelihood: c.new_feature_likelihood,
            map_sigma: c.map_sigma,
            noise_scale: c.noise_scale,
            map_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Default full.
    pub mode: Mode,
    /// Laps to complete, counting the mapping lap. Default 10, range [1, 1000].
    pub laps: u32,
    /// Default 1.
    pub seed: u64,
    /// Simulated time limit, s. Default 1200, range (0, 36000].
    pub max_time: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { mode: Mode::Full, laps: 10, seed: 1, max_time: 1200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub track: TrackSection,
    pub vehicle: VehicleSection,
    pub sensors: SensorsSection,
    pub weather: WeatherSection,
    pub ekf: EkfSection,
    pub slam: SlamSection,
    pub localizer: LocalizerSection,
    pub run: RunSection,
}

struct Checks(Vec<String>);

impl Checks {
    /// `lo`/`hi` pairs are (value, inclusive).
    fn range(&mut self, key: &str, v: f64, lo: (f64, bool), hi: (f64, bool)) {
        let above = if lo.1 { v >= lo.0 } else { v > lo.0 };
        let below = if hi.1 { v <= hi.0 } else { v < hi.0 };
        if !(above && below && !v.is_nan()) {
            let l = if lo.1 { '[' } else { '(' };
            let h = if hi.1 { ']' } else { ')' };
            self.0.push(format!("{key} = {v} outside {l}{}, {}{h}", lo.0, hi.0));
        }
    }

    fn int(&mut self, key: &str, v: u64, lo: u64, hi: u64) {
        if !(lo..=hi).contains(&v) {
            self.0.push(format!("{key} = {v} outside [{lo}, {hi}]"));
        }
    }
}

const INC: bool = true;
const EXC: bool = false;
const INF: f64 = f64::INFINITY;

impl Scenario {
    /// Parses TOML text, then validates. Errors list every offending key.
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let sc: Scenario = serde_ignored::deserialize(de, |path| unknown.push(format!("{path}: unknown key")))
            .map_err(|e| HarnessError::Validation(vec![e.message().trim().to_string()]))?;
        let mut errors = unknown;
        errors.extend(sc.check());
        if errors.is_empty() {
            Ok(sc)
        } else {
            Err(HarnessError::Validation(errors))
        }
    }

    /// Reads a config file; relative `file` paths are resolved against its
    /// directory.
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        let mut sc = Scenario::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut sc.track.file, &mut sc.localizer.map_file].into_iter().flatten() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.check();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Validation(errors))
        }
    }

    fn check(&self) -> Vec<String> {
        let mut c = Checks(Vec::new());
        let t = &self.track;
        c.range("track.length", t.length, (100.0, INC), (500.0, INC));
        c.range("track.width", t.width, (2.0, INC), (6.0, INC));
        c.range("track.cone_spacing", t.cone_spacing, (1.0, INC), (10.0, INC));
        if t.file.is_none() && t.length / std::f64::consts::TAU < 1.1 * min_turn_radius(t.width) {
            c.0.push(format!("track.width = {} too wide for track.length = {}", t.width, t.length));
        }

        let v = &self.vehicle;
        c.range("vehicle.wheelbase", v.wheelbase, (0.0, EXC), (5.0, INC));
        c.range("vehicle.max_steer", v.max_steer, (0.0, EXC), (1.2, INC));
        c.range("vehicle.speed_tau", v.speed_tau, (0.0, EXC), (10.0, INC));
        c.range("vehicle.lookahead_time", v.lookahead_time, (0.0, EXC), (5.0, INC));
        c.range("vehicle.min_lookahead", v.min_lookahead, (0.0, EXC), (20.0, INC));
        c.range("vehicle.slam_speed", v.slam_speed, (0.0, EXC), (40.0, INC));
        c.range("vehicle.race_speed", v.race_speed, (0.0, EXC), (40.0, INC));

        let s = &self.sensors;
        c.range("sensors.gps_sigma", s.gps_sigma, (0.0, INC), (10.0, INC));
        c.range("sensors.velocity_sigma", s.velocity_sigma, (0.0, INC), (5.0, INC));
        c.range("sensors.gyro_sigma", s.gyro_sigma, (0.0, INC), (1.0, INC));
        c.range("sensors.accel_sigma", s.accel_sigma, (0.0, INC), (10.0, INC));
        c.range("sensors.point_sigma", s.point_sigma, (0.0, INC), (0.2, INC));
        c.range("sensors.lidar_range", s.lidar_range, (0.0, EXC), (100.0, INC));
        if let Some(b) = s.blackout_after {
            c.range("sensors.blackout_after", b, (0.0, INC), (INF, EXC));
        }

        let w = &self.weather;
        c.range("weather.lidar_range_factor", w.lidar_range_factor, (0.0, EXC), (1.0, INC));
        c.range("weather.clutter_rate", w.clutter_rate, (0.0, INC), (100.0, INC));
        c.range("weather.gps_dropout", w.gps_dropout, (0.0, INC), (1.0, INC));
        c.range("weather.gps_bias_rate", w.gps_bias_rate, (0.0, INC), (10.0, INC));
        c.range("weather.gps_bias_start", w.gps_bias_start, (0.0, INC), (INF, EXC));
        c.range("weather.gps_bias_direction", w.gps_bias_direction, (-INF, EXC), (INF, EXC));

        let e = &self.ekf;
        c.range("ekf.gate_p", e.gate_p, (0.0, EXC), (1.0, EXC));
        c.int("ekf.window", e.window as u64, 1, 10_000);
        c.range("ekf.reject_fraction", e.reject_fraction, (0.0, EXC), (1.0, INC));
        c.int("ekf.recovery", e.recovery as u64, 1, 10_000);
        c.range("ekf.divergence_trace", e.divergence_trace, (0.0, EXC), (INF, EXC));
        for (i, q) in e.process_noise.iter().enumerate() {
            c.range(&format!("ekf.process_noise[{i}]"), *q, (0.0, INC), (INF, EXC));
        }

        let m = &self.slam;
        c.int("slam.particles", m.particles as u64, 1, 5000);
        c.range("slam.gate_p", m.gate_p, (0.0, EXC), (1.0, EXC));
        c.range("slam.new_landmark_likelihood", m.new_landmark_likelihood, (0.0, EXC), (1.0, INC));
        c.int("slam.min_hits", m.min_hits as u64, 1, 1000);
        c.range("slam.merge_dist", m.merge_dist, (0.0, INC), (5.0, INC));
        c.range("slam.noise_scale", m.noise_scale, (0.0, EXC), (100.0, INC));
        c.range("slam.min_travel", m.min_travel, (0.0, EXC), (INF, EXC));
        c.range("slam.closure_radius", m.closure_radius, (0.0, EXC), (50.0, INC));
        c.range("slam.closure_heading", m.closure_heading, (0.0, EXC), (std::f64::consts::PI, INC));

        let l = &self.localizer;
        c.int("localizer.particles", l.particles as u64, 1, 5000);
        c.range("localizer.gate_p", l.gate_p, (0.0, EXC), (1.0, EXC));
        c.range("localizer.new_feature_likelihood", l.new_feature_likelihood, (0.0, EXC), (1.0, INC));
        c.range("localizer.map_sigma", l.map_sigma, (0.0, INC), (2.0, INC));
        c.range("localizer.noise_scale", l.noise_scale, (0.0, EXC), (100.0, INC));

        let r = &self.run;
        c.int("run.laps", r.laps as u64, 1, 1000);
        c.range("run.max_time", r.max_time, (0.0, EXC), (36_000.0, INC));
        c.0
    }

    pub fn track_seed(&self) -> u64 {
        self.track.seed.unwrap_or(self.run.seed)
    }

    pub fn vehicle_params(&self) -> VehicleParams {
        let v = &self.vehicle;
        VehicleParams {
            wheelbase: v.wheelbase,
            max_steer: v.max_steer,
            speed_tau: v.speed_tau,
            min_lookahead: v.min_lookahead,
        }
    }

    pub fn nav_noise(&self) -> NavNoise {
        let s = &self.sensors;
        NavNoise { gps: s.gps_sigma, velocity: s.velocity_sigma, gyro: s.gyro_sigma, accel: s.accel_sigma }
    }

    pub fn lidar_config(&self) -> LidarSimConfig {
        LidarSimConfig {
            max_range: self.sensors.lidar_range,
            point_sigma: self.sensors.point_sigma,
            ..LidarSimConfig::default()
        }
    }

    pub fn weather_profile(&self) -> WeatherProfile {
        let w = &self.weather;
        WeatherProfile {
            lidar_range_factor: w.lidar_range_factor,
            clutter_rate: w.clutter_rate,
            gps_dropout: w.gps_dropout,
            gps_bias_rate: w.gps_bias_rate,
            gps_bias_start: w.gps_bias_start,
            gps_bias_direction: w.gps_bias_direction,
        }
    }

    pub fn ekf_config(&self) -> EkfConfig {
        let e = &self.ekf;
        EkfConfig {
            q: ProcessNoise(e.process_noise),
            gate_p: e.gate_p,
            health: HealthConfig { window: e.window, reject_fraction: e.reject_fraction, recovery: e.recovery },
            divergence_trace: e.divergence_trace,
            fault_detection: e.fault_detection,
        }
    }

    pub fn slam_config(&self) -> SlamConfig {
        let m = &self.slam;
        SlamConfig {
            particles: m.particles,
            gate_p: m.gate_p,
            new_landmark_likelihood: m.new_landmark_likelihood,
            min_hits: m.min_hits,
            merge_dist: m.merge_dist,
            noise_scale: m.noise_scale,
            min_travel: m.min_travel,
            closure_radius: m.closure_radius,
            closure_heading: m.closure_heading,
            ..SlamConfig::default()
        }
    }

    pub fn localizer_config(&self) -> LocalizerConfig {
        let l = &self.localizer;
        LocalizerConfig {
            particles: l.particles,
            gate_p: l.gate_p,
            new_feature_likelihood: l.new_feature_likelihood,
            map_sigma: l.map_sigma,
            noise_scale: l.noise_scale,
            ..LocalizerConfig::default()
        }
    }
}
