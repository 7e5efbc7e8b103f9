//! Deterministic closed-loop world: track, vehicle, sensors.

mod sensors;
mod track;
mod vehicle;

pub use sensors::{
    sense_lidar, LidarSimConfig, NavNoise, NavSample, NavSensors, WeatherProfile, GPS_EVERY, GYRO_EVERY,
    IMU_EVERY, LIDAR_EVERY, TICK, VELOCITY_EVERY,
};
pub use track::{generate_track, min_turn_radius, Track, TrackParams};
pub use vehicle::{pure_pursuit, step_vehicle, steer_towards, Command, TruthState, VehicleParams};
