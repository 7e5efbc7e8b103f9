//! Sensor models: LiDAR point clouds and the navigation suite.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use rand_distr::{Distribution, Poisson};

use crate::ekf::{ImuInput, Measurement};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::lidar::{Point3, PointCloud};
use crate::rng::{stream_id, tags, SeededRng};

use super::vehicle::TruthState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherProfile {
    /// Multiplier on the LiDAR's maximum range, (0, 1].
    pub lidar_range_factor: f64,
    /// Mean clutter points per scan.
    pub clutter_rate: f64,
    pub gps_dropout: f64,
    /// GPS bias growth, m/s.
    pub gps_bias_rate: f64,
    /// Time the bias starts growing, s.
    pub gps_bias_start: f64,
    /// Direction of the bias in the world frame, rad.
    pub gps_bias_direction: f64,
}

impl Default for WeatherProfile {
    fn default() -> Self {
        WeatherProfile {
            lidar_range_factor: 1.0,
            clutter_rate: 0.0,
            gps_dropout: 0.0,
            gps_bias_rate: 0.0,
            gps_bias_start: 0.0,
            gps_bias_direction: FRAC_PI_4,
        }
    }
}

impl WeatherProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.lidar_range_factor > 0.0 && self.lidar_range_factor <= 1.0) {
            return Err(Error::invalid("lidar_range_factor", "must be in (0, 1]"));
        }
        if !(self.clutter_rate >= 0.0 && self.clutter_rate.is_finite()) {
            return Err(Error::invalid("clutter_rate", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gps_dropout) {
            return Err(Error::invalid("gps_dropout", "must be in [0, 1]"));
        }
        if !(self.gps_bias_rate >= 0.0 && self.gps_bias_start >= 0.0) {
            return Err(Error::invalid("gps_bias", "rate and start must be non-negative"));
        }
        Ok(())
    }

    pub fn gps_bias(&self, t: f64) -> Point2 {
        let m = self.gps_bias_rate * (t - self.gps_bias_start).max(0.0);
        Point2::new(m * self.gps_bias_direction.cos(), m * self.gps_bias_direction.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSimConfig {
    pub max_range: f64,
    pub cone_height: f64,
    pub cone_base_radius: f64,
    /// Top radius as a fraction of the base radius.
    pub cone_top_ratio: f64,
    pub point_sigma: f64,
    /// n(range) = max(3, round(point_budget / range)).
    pub point_budget: f64,
    pub clutter_max_z: f64,
}

impl Default for LidarSimConfig {
    fn default() -> Self {
        LidarSimConfig {
            max_range: 12.0,
            cone_height: 0.31,
            cone_base_radius: 0.11,
            cone_top_ratio: 0.25,
            point_sigma: 0.02,
            point_budget: 60.0,
            clutter_max_z: 0.5,
        }
    }
}

impl LidarSimConfig {
    pub fn points_at(&self, range: f64) -> usize {
        ((self.point_budget / range).round() as usize).max(3)
    }

    fn radius_at(&self, z: f64) -> f64 {
        let f = (z / self.cone_height).clamp(0.0, 1.0);
        self.cone_base_radius * (1.0 - f * (1.0 - self.cone_top_ratio))
    }
}

/// Scan-ring spacing on the cone surface, m.
const RING_SPACING: f64 = 0.06;
const RING_CENTRE_FRACTION: f64 = 0.55;
const POINTS_PER_RING: usize = 12;
const MAX_RINGS: usize = 4;

/// Samples one scan in the vehicle frame. Each cone within range returns
/// `n(range)` points on up to four horizontal scan rings across the visible
/// half of its frustum, perturbed along the beam. Clutter is uniform over
/// the sensing disc.
pub fn sense_lidar(
    truth: &TruthState,
    cones: &[Point2],
    weather: &WeatherProfile,
    cfg: &LidarSimConfig,
    rng: &mut SeededRng,
) -> PointCloud {
    let reach = cfg.max_range * weather.lidar_range_factor;
    let mut points = Vec::new();
    for cone in cones {
        let local = truth.pose.inverse_transform_point(cone);
        let range = local.norm();
        if range > reach || range < 0.5 {
            continue;
        }
        let n = cfg.points_at(range);
        let rings = n.div_ceil(POINTS_PER_RING).clamp(1, MAX_RINGS);
        let centre = RING_CENTRE_FRACTION * cfg.cone_height;
        for ring in 0..rings {
            let z = centre + (ring as f64 - (rings - 1) as f64 / 2.0) * RING_SPACING;
            let radius = cfg.radius_at(z);
            let m = n / rings + usize::from(ring < n % rings);
            // the face turned towards the sensor, evenly spaced with a random offset
            let facing = (-local.y).atan2(-local.x);
            let offset = rng.uniform() - 0.5;
            for k in 0..m {
                let a = facing + PI * ((k as f64 + 0.5 + offset) / m as f64 - 0.5);
                let p = Point3::new(local.x + radius * a.cos(), local.y + radius * a.sin(), z);
                // range noise along the beam
                points.push(p + p.normalize() * (cfg.point_sigma * rng.normal()));
            }
        }
    }
    if weather.clutter_rate > 0.0 {
        let count = Poisson::new(weather.clutter_rate)
            .map(|p| p.sample(rng) as usize)
            .unwrap_or(0);
        for _ in 0..count {
            let r = reach * rng.uniform().sqrt();
            let a = TAU * rng.uniform();
            points.push(Point3::new(r * a.cos(), r * a.sin(), cfg.clutter_max_z * rng.uniform()));
        }
    }
    PointCloud { t: truth.t, points }
}

/// Standard deviations of the navigation sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavNoise {
    pub gps: f64,
    pub velocity: f64,
    pub gyro: f64,
    pub accel: f64,
}

impl Default for NavNoise {
    fn default() -> Self {
        NavNoise { gps: 0.15, velocity: 0.05, gyro: 0.01, accel: 0.1 }
    }
}

impl NavNoise {
    pub fn zero() -> Self {
        NavNoise { gps: 0.0, velocity: 0.0, gyro: 0.0, accel: 0.0 }
    }
}

/// Smallest standard deviation reported in a measurement covariance.
const SIGMA_FLOOR: f64 = 1e-6;

/// Base tick of the simulation, s.
pub const TICK: f64 = 0.005;
pub const IMU_EVERY: u64 = 1;
pub const GYRO_EVERY: u64 = 1;
pub const VELOCITY_EVERY: u64 = 4;
pub const GPS_EVERY: u64 = 20;
pub const LIDAR_EVERY: u64 = 20;

#[derive(Debug, Clone, Default)]
pub struct NavSample {
    pub imu: Option<ImuInput>,
    /// In channel priority order: yaw rate, velocity, GPS.
    pub measurements: Vec<Measurement>,
}

/// Navigation sensor suite sampled on the simulation tick grid: IMU and gyro
/// at 200 Hz, body velocity at 50 Hz, GPS at 10 Hz. Each channel owns its
/// random stream.
#[derive(Debug, Clone)]
pub struct NavSensors {
    noise: NavNoise,
    weather: WeatherProfile,
    gps_rng: SeededRng,
    vel_rng: SeededRng,
    gyro_rng: SeededRng,
    imu_rng: SeededRng,
    prev: Option<TruthState>,
    /// Drops every channel when set.
    pub blackout: bool,
}

impl NavSensors {
    pub fn new(seed: u64, noise: NavNoise, weather: WeatherProfile) -> Self {
        NavSensors {
            noise,
            weather,
            gps_rng: SeededRng::new(seed, stream_id(tags::GPS, 0, 0)),
            vel_rng: SeededRng::new(seed, stream_id(tags::VELOCITY, 0, 0)),
            gyro_rng: SeededRng::new(seed, stream_id(tags::GYRO, 0, 0)),
            imu_rng: SeededRng::new(seed, stream_id(tags::IMU, 0, 0)),
            prev: None,
            blackout: false,
        }
    }

    /// Samples every channel due at `tick`; `truth` is the state at that tick.
    pub fn sense(&mut self, tick: u64, truth: &TruthState) -> Result<NavSample> {
        let prev = self.prev.replace(*truth);
        let mut out = NavSample::default();
        if self.blackout {
            return Ok(out);
        }
        let t = truth.t;
        let n = self.noise;
        if tick.is_multiple_of(IMU_EVERY) {
            // mean acceleration over the last tick; centripetal term from the
            // interval's start so it matches the Euler prediction
            let (ax, ay) = match prev {
                Some(p) if truth.t > p.t => ((truth.vx - p.vx) / (truth.t - p.t), p.r * p.vx),
                _ => (0.0, truth.r * truth.vx),
            };
            out.imu = Some(ImuInput {
                t,
                ax: ax + n.accel * self.imu_rng.normal(),
                ay: ay + n.accel * self.imu_rng.normal(),
            });
        }
        if tick.is_multiple_of(GYRO_EVERY) {
            let r = truth.r + n.gyro * self.gyro_rng.normal();
            out.measurements.push(Measurement::yaw_rate(t, r, n.gyro.max(SIGMA_FLOOR))?);
        }
        if tick.is_multiple_of(VELOCITY_EVERY) {
            let vx = truth.vx + n.velocity * self.vel_rng.normal();
            let vy = truth.vy + n.velocity * self.vel_rng.normal();
            out.measurements.push(Measurement::body_velocity(t, vx, vy, n.velocity.max(SIGMA_FLOOR))?);
        }
        if tick.is_multiple_of(GPS_EVERY) {
            // draw noise before the dropout decision so the stream stays
            // aligned across dropout settings
            let (ex, ey) = (self.gps_rng.normal(), self.gps_rng.normal());
            let keep = self.gps_rng.uniform() >= self.weather.gps_dropout;
            if keep {
                let bias = self.weather.gps_bias(t);
                out.measurements.push(Measurement::gps(
                    t,
                    truth.pose.x + bias.x + n.gps * ex,
                    truth.pose.y + bias.y + n.gps * ey,
                    n.gps.max(SIGMA_FLOOR),
                )?);
            }
        }
        Ok(out)
    }
}
