//! Monte Carlo localization against a frozen cone map.
//!
//! The particle filter uses the same odometry proposal and range-bearing
//! likelihood as the mapper, but the map is shared read-only: each cone is a
//! point with isotropic uncertainty σ_map. Every step yields a virtual pose
//! measurement for the vehicle estimator.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::ekf::Measurement;
use crate::error::{Error, Result};
use crate::geometry::{wrap, Point2, Pose2};
use crate::lidar::ConeObservation;
use crate::rangebearing as rb;
use crate::rng::{stream_id, tags, SeededRng};
use crate::slam::{
    associate_among, effective_sample_size, normalized_weights, sample_motion, sorted_by_bearing,
    systematic_indices, Association, ConeMap, MotionNoise, Odometry,
};
use crate::stats::chi2_gate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerConfig {
    pub particles: usize,
    pub gate_p: f64,
    pub new_feature_likelihood: f64,
    /// Positional uncertainty of each map cone, m.
    pub map_sigma: f64,
    pub motion: MotionNoise,
    pub noise_scale: f64,
    /// Floor on the reported pose covariance: σx, σy (m), σψ (rad).
    pub r_min: [f64; 3],
    /// Spread of the initial particle cloud: σx, σy (m), σψ (rad).
    pub init_sigma: [f64; 3],
    /// With at least this many observations and none matching the map in
    /// any particle, the filter reports itself lost.
    pub loss_min_observations: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            particles: 200,
            gate_p: 0.99,
            new_feature_likelihood: 1e-4,
            map_sigma: 0.1,
            motion: MotionNoise::default(),
            noise_scale: 1.0,
            r_min: [0.05, 0.05, 1f64.to_radians()],
            init_sigma: [0.5, 0.5, 0.05],
            loss_min_observations: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocParticle {
    pub pose: Pose2,
    pub log_weight: f64,
    rng: SeededRng,
}

const INDEX_CELL: f64 = 2.0;

/// Uniform-grid lookup over the frozen map.
#[derive(Debug, Clone)]
struct MapIndex {
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl MapIndex {
    fn new(map: &ConeMap) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in map.cones.iter().enumerate() {
            cells.entry(Self::key(c)).or_default().push(i);
        }
        MapIndex { cells }
    }

    fn key(p: &Point2) -> (i64, i64) {
        ((p.x / INDEX_CELL).floor() as i64, (p.y / INDEX_CELL).floor() as i64)
    }

    /// Cone ids within `radius` of `p` (plus some further ones), ascending.
    fn near(&self, p: &Point2, radius: f64) -> Vec<usize> {
        let (cx, cy) = Self::key(p);
        let k = (radius / INDEX_CELL).ceil() as i64;
        let mut out = Vec::new();
        for dx in -k..=k {
            for dy in -k..=k {
                if let Some(ids) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend_from_slice(ids);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone)]
pub struct LocalizerState {
    pub particles: Vec<LocParticle>,
    map: Arc<ConeMap>,
    index: MapIndex,
    config: LocalizerConfig,
    gate: f64,
    seed: u64,
    /// Steps taken since construction.
    pub epoch: u64,
    /// Number of (re)initializations; the first happens on construction.
    pub resets: u64,
    estimate: Pose2,
    cov: Matrix3<f64>,
}

impl LocalizerState {
    pub fn new(seed: u64, map: Arc<ConeMap>, init: Pose2, config: LocalizerConfig) -> Result<Self> {
        if config.particles == 0 {
            return Err(Error::invalid("particles", "must be positive"));
        }
        if !(config.map_sigma >= 0.0) {
            return Err(Error::invalid("map_sigma", "must be non-negative"));
        }
        let gate = chi2_gate(2, config.gate_p)?;
        let index = MapIndex::new(&map);
        let mut s = LocalizerState {
            particles: Vec::new(),
            map,
            index,
            config,
            gate,
            seed,
            epoch: 0,
            resets: 0,
            estimate: init,
            cov: Matrix3::zeros(),
        };
        s.reinitialize(&init);
        Ok(s)
    }

    /// Scatters the particles around `pose` with the configured spread.
    pub fn reinitialize(&mut self, pose: &Pose2) {
        self.resets += 1;
        let m = self.config.particles;
        let sig = self.config.init_sigma;
        let mut rng = SeededRng::new(self.seed, stream_id(tags::LOC_INIT, self.resets, 0));
        let lw = -(m as f64).ln();
        self.particles = (0..m)
            .map(|i| LocParticle {
                pose: Pose2::new(
                    pose.x + sig[0] * rng.normal(),
                    pose.y + sig[1] * rng.normal(),
                    pose.psi + sig[2] * rng.normal(),
                ),
                log_weight: lw,
                rng: SeededRng::new(self.seed, stream_id(tags::LOC_PARTICLE, self.resets << 32 | self.epoch, i as u64)),
            })
            .collect();
        self.estimate = *pose;
        self.cov = Matrix3::from_diagonal(&Vector3::new(sig[0] * sig[0], sig[1] * sig[1], sig[2] * sig[2]));
    }

    pub fn map(&self) -> &Arc<ConeMap> {
        &self.map
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.config
    }

    pub fn estimate(&self) -> (Pose2, Matrix3<f64>) {
        (self.estimate, self.cov)
    }

    fn map_sigma_matrix(&self) -> Matrix2<f64> {
        Matrix2::identity() * (self.config.map_sigma * self.config.map_sigma)
    }

    /// Log-likelihood contribution and whether it matched a map cone.
    fn weigh(&self, pose: &Pose2, obs: &ConeObservation, sigma: &Matrix2<f64>) -> (f64, bool) {
        let b = rb::backproject(pose, obs.range, obs.bearing);
        let spread = obs.r[(0, 0)] + obs.range * obs.range * obs.r[(1, 1)] + sigma.trace();
        let radius = (4.0 * self.gate * spread).sqrt();
        let ids = self.index.near(&b, radius);
        let cones = &self.map.cones;
        match associate_among(pose, obs, self.gate, ids.iter().map(|&i| (i, &cones[i], sigma))) {
            Association::Existing { log_likelihood, .. } => (log_likelihood, true),
            Association::New => (self.config.new_feature_likelihood.ln(), false),
        }
    }

    /// One filter step: propagate by `odom`, weigh against the map, form the
    /// pose estimate, resample if the sample has degenerated.
    pub fn step(&mut self, t: f64, odom: &Odometry, dt: f64, observations: &[ConeObservation]) -> Result<Measurement> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", format!("{dt} must be positive")));
        }
        let cfg = self.config;
        self.particles.par_iter_mut().for_each(|p| {
            p.pose = sample_motion(&p.pose, odom, dt, &cfg.motion, cfg.noise_scale, &mut p.rng);
        });
        self.epoch += 1;

        let sorted = sorted_by_bearing(observations);
        if !sorted.is_empty() {
            let sigma = self.map_sigma_matrix();
            let this = &*self;
            let scored: Vec<(f64, usize)> = this
                .particles
                .par_iter()
                .map(|p| {
                    sorted.iter().fold((0.0, 0), |(ll, n), o| {
                        let (l, hit) = this.weigh(&p.pose, o, &sigma);
                        (ll + l, n + usize::from(hit))
                    })
                })
                .collect();
            let matched = scored.iter().map(|s| s.1).max().unwrap_or(0);
            if sorted.len() >= cfg.loss_min_observations && matched == 0 {
                return Err(Error::LocalizationLost);
            }
            for (p, (ll, _)) in self.particles.iter_mut().zip(&scored) {
                p.log_weight += ll;
            }
        }

        let w = normalized_weights(self.particles.iter().map(|p| p.log_weight))
            .map_err(|_| Error::LocalizationLost)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::LocalizationLost);
        }
        for (p, wi) in self.particles.iter_mut().zip(&w) {
            p.log_weight = wi.ln();
        }
        let (pose, cov) = weighted_pose(self.particles.iter().map(|p| &p.pose), &w, &cfg.r_min);
        self.estimate = pose;
        self.cov = cov;

        if effective_sample_size(&w) < cfg.particles as f64 / 2.0 {
            self.resample(&w);
        }
        Measurement::virtual_pose(t, &pose, DMatrix::from_column_slice(3, 3, cov.as_slice()))
    }

    fn resample(&mut self, w: &[f64]) {
        let gen = self.resets << 32 | self.epoch;
        let mut draw = SeededRng::new(self.seed, stream_id(tags::LOC_RESAMPLE, gen, 0));
        let idx = systematic_indices(w, draw.uniform());
        let lw = -(self.particles.len() as f64).ln();
        self.particles = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| LocParticle {
                pose: self.particles[i].pose,
                log_weight: lw,
                rng: SeededRng::new(self.seed, stream_id(tags::LOC_PARTICLE, gen, j as u64)),
            })
            .collect();
    }
}

pub fn mcl_step(
    state: &mut LocalizerState,
    t: f64,
    odom: &Odometry,
    dt: f64,
    observations: &[ConeObservation],
) -> Result<Measurement> {
    state.step(t, odom, dt, observations)
}

/// Weighted mean pose (circular mean heading) and weighted sample covariance,
/// with the diagonal floored at `r_min²`. If the result is still not
/// positive definite, `diag(r_min²)` is added.
pub fn weighted_pose<'a>(poses: impl Iterator<Item = &'a Pose2> + Clone, w: &[f64], r_min: &[f64; 3]) -> (Pose2, Matrix3<f64>) {
    let (mut mx, mut my, mut ms, mut mc) = (0.0, 0.0, 0.0, 0.0);
    for (p, wi) in poses.clone().zip(w) {
        mx += wi * p.x;
        my += wi * p.y;
        ms += wi * p.psi.sin();
        mc += wi * p.psi.cos();
    }
    let mean = Pose2::new(mx, my, ms.atan2(mc));
    let mut cov = Matrix3::zeros();
    for (p, wi) in poses.zip(w) {
        let d = Vector3::new(p.x - mean.x, p.y - mean.y, wrap(p.psi - mean.psi));
        cov += d * d.transpose() * *wi;
    }
    let floor = Vector3::new(r_min[0] * r_min[0], r_min[1] * r_min[1], r_min[2] * r_min[2]);
    for i in 0..3 {
        cov[(i, i)] = cov[(i, i)].max(floor[i]);
    }
    cov = (cov + cov.transpose()) * 0.5;
    if cov.cholesky().is_none() {
        cov += Matrix3::from_diagonal(&floor);
    }
    (mean, cov)
}

/// Innovation covariance of a map cone seen from `pose`:
/// R + σ_map² · diag(1, 1/q) with q the squared range.
fn map_innovation_cov(pose: &Pose2, obs: &ConeObservation, cone: &Point2, map_sigma: f64) -> (Matrix2<f64>, f64, f64, f64) {
    let dx = cone.x - pose.x;
    let dy = cone.y - pose.y;
    let q = dx * dx + dy * dy;
    let s2 = map_sigma * map_sigma;
    (obs.r + Matrix2::new(s2, 0.0, 0.0, s2 / q), dx, dy, q)
}

/// Log-likelihood of one observation of `cone` from `pose` and its gradient
/// with respect to (x, y, ψ). `None` if the innovation covariance is singular.
pub fn log_likelihood_gradient(
    pose: &Pose2,
    obs: &ConeObservation,
    cone: &Point2,
    map_sigma: f64,
) -> Option<(f64, Vector3<f64>)> {
    let (s, dx, dy, q) = map_innovation_cov(pose, obs, cone, map_sigma);
    let nu = rb::innovation(&obs.z(), &rb::predict(pose, cone));
    let (_, ll) = rb::gaussian_log_likelihood(&nu, &s)?;
    let s_inv = s.try_inverse()?;
    let a = s_inv * nu;
    let j = rb::jacobian_pose(pose, cone);
    let mut grad: Vector3<f64> = (a.transpose() * j).transpose();
    // S depends on the pose through q
    let ds_dq = Matrix2::new(0.0, 0.0, 0.0, -map_sigma * map_sigma / (q * q));
    let dll_dq = 0.5 * (a.transpose() * ds_dq * a)[(0, 0)] - 0.5 * (s_inv * ds_dq).trace();
    grad.x += dll_dq * (-2.0 * dx);
    grad.y += dll_dq * (-2.0 * dy);
    Some((ll, grad))
}
