//! FastSLAM 1.0 over cone landmarks.
//!
//! Each particle carries a pose hypothesis and an independent 2-D EKF per
//! landmark. The proposal is the odometry increment plus Gaussian noise;
//! observations are associated by maximum likelihood inside a chi-square
//! gate, and unmatched observations spawn new landmarks at a fixed
//! new-feature likelihood.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{wrap, Point2, Pose2};
use crate::lidar::ConeObservation;
use crate::rangebearing as rb;
use crate::rng::{stream_id, tags, SeededRng};
use crate::stats::chi2_gate;

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub mu: Point2,
    pub sigma: Matrix2<f64>,
    pub hits: u32,
}

#[derive(Debug, Clone)]
pub struct Particle {
    pub pose: Pose2,
    pub log_weight: f64,
    pub landmarks: Vec<Landmark>,
    rng: SeededRng,
}

impl Particle {
    pub fn new(pose: Pose2, log_weight: f64, rng: SeededRng) -> Self {
        Particle { pose, log_weight, landmarks: Vec::new(), rng }
    }

    pub fn rng_stream(&self) -> u64 {
        self.rng.stream()
    }
}

impl PartialEq for Particle {
    fn eq(&self, other: &Self) -> bool {
        self.pose == other.pose
            && self.log_weight.to_bits() == other.log_weight.to_bits()
            && self.landmarks == other.landmarks
            && self.rng.stream() == other.rng.stream()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    /// Measurement epochs processed so far.
    pub epoch: u64,
    seed: u64,
}

impl ParticleSet {
    /// `n` particles at `pose` with uniform weight, one random stream each.
    pub fn new(seed: u64, n: usize, pose: Pose2) -> Self {
        let lw = -(n as f64).ln();
        let particles = (0..n)
            .map(|i| Particle::new(pose, lw, SeededRng::new(seed, stream_id(tags::SLAM_PARTICLE, 0, i as u64))))
            .collect();
        ParticleSet { particles, epoch: 0, seed }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalized_weights(self.particles.iter().map(|p| p.log_weight))
    }

    pub fn effective_sample_size(&self) -> Result<f64> {
        Ok(effective_sample_size(&self.normalized_weights()?))
    }

    /// Index of the highest-weight particle (lowest index on ties).
    pub fn best_index(&self) -> Option<usize> {
        self.particles
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, p)| match best {
                Some((_, w)) if w >= p.log_weight => best,
                _ => Some((i, p.log_weight)),
            })
            .map(|(i, _)| i)
    }

    /// Shifts log weights so they exponentiate to a unit sum.
    pub fn normalize(&mut self) -> Result<()> {
        let lse = log_sum_exp(self.particles.iter().map(|p| p.log_weight))?;
        for p in &mut self.particles {
            p.log_weight -= lse;
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(lw: impl Iterator<Item = f64> + Clone) -> Result<f64> {
    let max = lw.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights("no finite log weight".into()));
    }
    let s: f64 = lw.map(|w| (w - max).exp()).sum();
    Ok(max + s.ln())
}

pub(crate) fn normalized_weights(lw: impl Iterator<Item = f64> + Clone) -> Result<Vec<f64>> {
    let lse = log_sum_exp(lw.clone())?;
    Ok(lw.map(|w| (w - lse).exp()).collect())
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Body-frame motion increment: forward, leftward, heading change.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Odometry {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

impl Odometry {
    pub fn as_pose(&self) -> Pose2 {
        Pose2 { x: self.dx, y: self.dy, psi: self.dpsi }
    }

    /// Appends a further body-frame increment.
    pub fn accumulate(&mut self, step: &Odometry) {
        let p = self.as_pose().compose(&step.as_pose());
        // keep the raw heading sum; increments between frames stay far below π
        *self = Odometry { dx: p.x, dy: p.y, dpsi: self.dpsi + step.dpsi };
    }

    pub fn distance(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Standard deviations of the odometry proposal. Proportional terms scale
/// with the increment, floor terms with √dt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionNoise {
    pub trans_per_m: f64,
    pub trans_floor: f64,
    pub rot_per_rad: f64,
    pub rot_per_m: f64,
    pub rot_floor: f64,
}

// Sized to the error of odometry integrated from fused velocity and yaw
// rate: roughly 0.2 mrad and 2 mm per 0.1 s frame at mapping speed.
impl Default for MotionNoise {
    fn default() -> Self {
        MotionNoise {
            trans_per_m: 0.0025,
            trans_floor: 0.001,
            rot_per_rad: 0.004,
            rot_per_m: 0.0002,
            rot_floor: 0.0002,
        }
    }
}

impl MotionNoise {
    pub fn sigmas(&self, odom: &Odometry, dt: f64, scale: f64) -> (f64, f64) {
        let d = odom.distance();
        let st = scale * (self.trans_per_m * d + self.trans_floor * dt.sqrt());
        let sr = scale * (self.rot_per_rad * odom.dpsi.abs() + self.rot_per_m * d + self.rot_floor * dt.sqrt());
        (st, sr)
    }
}

/// Propagates one pose by a noisy odometry increment drawn from `rng`.
pub(crate) fn sample_motion(
    pose: &Pose2,
    odom: &Odometry,
    dt: f64,
    noise: &MotionNoise,
    scale: f64,
    rng: &mut SeededRng,
) -> Pose2 {
    let (st, sr) = noise.sigmas(odom, dt, scale);
    let (n1, n2, n3) = (rng.normal(), rng.normal(), rng.normal());
    pose.compose(&Pose2 { x: odom.dx + st * n1, y: odom.dy + st * n2, psi: odom.dpsi + sr * n3 })
}

pub fn pf_predict(ps: &mut ParticleSet, odom: &Odometry, dt: f64, noise: &MotionNoise, noise_scale: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("{dt} must be positive")));
    }
    ps.particles.par_iter_mut().for_each(|p| {
        p.pose = sample_motion(&p.pose, odom, dt, noise, noise_scale, &mut p.rng);
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Association {
    Existing { id: usize, d2: f64, log_likelihood: f64 },
    New,
}

/// Cartesian spread of a back-projected observation: trace of G R Gᵀ.
fn backprojection_spread(obs: &ConeObservation) -> f64 {
    obs.r[(0, 0)] + obs.range * obs.range * obs.r[(1, 1)]
}

/// Innovation and its covariance for `obs` against a landmark estimate.
fn innovation_terms(pose: &Pose2, obs: &ConeObservation, mu: &Point2, sigma: &Matrix2<f64>) -> (Vector2<f64>, Matrix2<f64>, Matrix2<f64>) {
    let h = rb::jacobian_landmark(pose, mu);
    let nu = rb::innovation(&obs.z(), &rb::predict(pose, mu));
    let s = h * sigma * h.transpose() + obs.r;
    (nu, s, h)
}

/// Maximum-likelihood association against landmarks `(position, covariance)`
/// inside the chi-square gate. Exact evaluation is skipped for candidates whose
/// Euclidean distance already rules them out by a wide margin.
pub(crate) fn associate_among<'a>(
    pose: &Pose2,
    obs: &ConeObservation,
    gate: f64,
    candidates: impl Iterator<Item = (usize, &'a Point2, &'a Matrix2<f64>)>,
) -> Association {
    let b = rb::backproject(pose, obs.range, obs.bearing);
    let spread = backprojection_spread(obs);
    let mut best = Association::New;
    for (id, mu, sigma) in candidates {
        let bound = 4.0 * gate * (spread + sigma.trace());
        if (mu - b).norm_squared() > bound {
            continue;
        }
        let (nu, s, _) = innovation_terms(pose, obs, mu, sigma);
        let Some((d2, ll)) = rb::gaussian_log_likelihood(&nu, &s) else { continue };
        if d2 > gate {
            continue;
        }
        match best {
            Association::Existing { log_likelihood, .. } if log_likelihood >= ll => {}
            _ => best = Association::Existing { id, d2, log_likelihood: ll },
        }
    }
    best
}

pub fn associate(p: &Particle, obs: &ConeObservation, gate_p: f64) -> Result<Association> {
    let gate = chi2_gate(2, gate_p)?;
    Ok(associate_with_gate(p, obs, gate))
}

fn associate_with_gate(p: &Particle, obs: &ConeObservation, gate: f64) -> Association {
    associate_among(
        &p.pose,
        obs,
        gate,
        p.landmarks.iter().enumerate().map(|(i, l)| (i, &l.mu, &l.sigma)),
    )
}

/// 2-D EKF update of one landmark from one observation.
pub fn landmark_update(lm: &Landmark, obs: &ConeObservation, pose: &Pose2) -> Result<Landmark> {
    let (nu, s, h) = innovation_terms(pose, obs, &lm.mu, &lm.sigma);
    let s_inv = s
        .try_inverse()
        .filter(|_| s.determinant() > 0.0)
        .ok_or_else(|| Error::SingularInnovation {
            condition: crate::stats::condition_estimate(&nalgebra::DMatrix::from_column_slice(2, 2, s.as_slice())),
        })?;
    let k = lm.sigma * h.transpose() * s_inv;
    let ikh = Matrix2::identity() - k * h;
    let mut sigma = ikh * lm.sigma * ikh.transpose() + k * obs.r * k.transpose();
    let off = 0.5 * (sigma[(0, 1)] + sigma[(1, 0)]);
    sigma[(0, 1)] = off;
    sigma[(1, 0)] = off;
    Ok(Landmark { mu: lm.mu + k * nu, sigma, hits: lm.hits + 1 })
}

/// Back-projects an observation; covariance is the observation noise pushed
/// through the back-projection Jacobian.
pub fn landmark_init(pose: &Pose2, obs: &ConeObservation) -> Landmark {
    let g = rb::backproject_jacobian(pose, obs.range, obs.bearing);
    Landmark {
        mu: rb::backproject(pose, obs.range, obs.bearing),
        sigma: g * obs.r * g.transpose(),
        hits: 1,
    }
}

/// Applies a decided association to the particle.
pub fn apply_association(p: &mut Particle, obs: &ConeObservation, assoc: Association, log_p0: f64) {
    match assoc {
        Association::Existing { id, log_likelihood, .. } => {
            p.log_weight += log_likelihood;
            if let Ok(lm) = landmark_update(&p.landmarks[id], obs, &p.pose) {
                p.landmarks[id] = lm;
            }
        }
        Association::New => {
            p.log_weight += log_p0;
            p.landmarks.push(landmark_init(&p.pose, obs));
        }
    }
}

/// Observations in ascending bearing order (range, then input order, on ties).
pub fn sorted_by_bearing(observations: &[ConeObservation]) -> Vec<ConeObservation> {
    let mut obs = observations.to_vec();
    obs.sort_by(|a, b| a.bearing.total_cmp(&b.bearing).then(a.range.total_cmp(&b.range)));
    obs
}

pub fn weigh_and_update(p: &Particle, observations: &[ConeObservation], gate_p: f64, p0: f64) -> Result<Particle> {
    let gate = chi2_gate(2, gate_p)?;
    let mut next = p.clone();
    weigh_in_place(&mut next, &sorted_by_bearing(observations), gate, p0.ln());
    Ok(next)
}

fn weigh_in_place(p: &mut Particle, sorted: &[ConeObservation], gate: f64, log_p0: f64) {
    for obs in sorted {
        let a = associate_with_gate(p, obs, gate);
        apply_association(p, obs, a, log_p0);
    }
}

/// Ancestor indices for systematic resampling with offset `u0` ∈ [0, 1).
pub fn systematic_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut i = 0;
    for j in 0..n {
        let u = (u0 + j as f64) / n as f64;
        while u >= cum && i + 1 < n {
            i += 1;
            cum += weights[i] / total;
        }
        out.push(i);
    }
    out
}

/// Resamples when N_eff < N/2. Returns whether resampling happened.
pub fn resample(ps: &mut ParticleSet) -> Result<bool> {
    if ps.particles.iter().all(|p| !p.log_weight.is_finite()) {
        return Err(Error::DegenerateWeights("all log weights non-finite".into()));
    }
    let w = ps.normalized_weights()?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateWeights("non-finite normalized weight".into()));
    }
    let n = ps.len();
    if effective_sample_size(&w) >= n as f64 / 2.0 {
        return Ok(false);
    }
    let mut draw = SeededRng::new(ps.seed, stream_id(tags::SLAM_RESAMPLE, ps.epoch, 0));
    let idx = systematic_indices(&w, draw.uniform());
    let lw = -(n as f64).ln();
    ps.particles = idx
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let src = &ps.particles[i];
            Particle {
                pose: src.pose,
                log_weight: lw,
                landmarks: src.landmarks.clone(),
                rng: SeededRng::new(ps.seed, stream_id(tags::SLAM_PARTICLE, ps.epoch + 1, j as u64)),
            }
        })
        .collect();
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeMap {
    pub cones: Vec<Point2>,
    pub hits: Vec<u32>,
    /// Particle the map was taken from.
    pub source: usize,
}

impl ConeMap {
    pub fn from_points(cones: Vec<Point2>) -> Self {
        let hits = vec![1; cones.len()];
        ConeMap { cones, hits, source: 0 }
    }

    pub fn len(&self) -> usize {
        self.cones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cones.is_empty()
    }

    /// FNV-1a over the raw coordinate bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (c, n) in self.cones.iter().zip(&self.hits) {
            feed(c.x.to_bits());
            feed(c.y.to_bits());
            feed(*n as u64);
        }
        h
    }

    /// `x,y,hits` rows under a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "hits"])?;
        for (c, n) in self.cones.iter().zip(&self.hits) {
            wr.serialize((c.x, c.y, n))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<ConeMap> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "y", "hits"] {
            return Err(Error::invalid("map csv", "header must be `x,y,hits`"));
        }
        let mut map = ConeMap { cones: Vec::new(), hits: Vec::new(), source: 0 };
        for rec in rd.deserialize::<(f64, f64, u32)>() {
            let (x, y, n) = rec?;
            map.cones.push(Point2::new(x, y));
            map.hits.push(n);
        }
        Ok(map)
    }
}

/// Map of the highest-weight particle: landmarks with at least `min_hits`
/// observations, with pairs closer than `merge_dist` merged by hit-weighted
/// averaging (closest pair first).
pub fn extract_map(ps: &ParticleSet, min_hits: u32, merge_dist: f64) -> Result<ConeMap> {
    let best = ps.best_index().ok_or(Error::Empty("particle set"))?;
    let mut items: Vec<(Point2, u32)> = ps.particles[best]
        .landmarks
        .iter()
        .filter(|l| l.hits >= min_hits)
        .map(|l| (l.mu, l.hits))
        .collect();
    loop {
        let mut closest: Option<(usize, usize, f64)> = None;
        for i in 0..items.len() {
            for j in (i + 1)..items.len() {
                let d = (items[i].0 - items[j].0).norm();
                if d < merge_dist && closest.is_none_or(|(_, _, c)| d < c) {
                    closest = Some((i, j, d));
                }
            }
        }
        let Some((i, j, _)) = closest else { break };
        let (a, na) = items[i];
        let (b, nb) = items.remove(j);
        let n = na + nb;
        items[i] = ((a * na as f64 + b * nb as f64) / n as f64, n);
    }
    Ok(ConeMap {
        cones: items.iter().map(|(p, _)| *p).collect(),
        hits: items.iter().map(|(_, n)| *n).collect(),
        source: best,
    })
}

/// True once the path is at least `min_travel` long and its end is back
/// within `radius` of `start` with a similar heading.
pub fn detect_loop_closure(trajectory: &[Pose2], start: &Pose2, min_travel: f64, radius: f64, max_heading_diff: f64) -> bool {
    let Some(current) = trajectory.last() else { return false };
    let travel: f64 = trajectory.windows(2).map(|w| (w[1].position() - w[0].position()).norm()).sum();
    travel >= min_travel
        && (current.position() - start.position()).norm() <= radius
        && wrap(current.psi - start.psi).abs() <= max_heading_diff
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamConfig {
    pub particles: usize,
    pub gate_p: f64,
    /// Likelihood assigned to an observation that starts a new landmark.
    pub new_landmark_likelihood: f64,
    pub min_hits: u32,
    pub merge_dist: f64,
    pub motion: MotionNoise,
    pub noise_scale: f64,
    pub min_travel: f64,
    pub closure_radius: f64,
    pub closure_heading: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            particles: 200,
            gate_p: 0.99,
            new_landmark_likelihood: 1e-4,
            min_hits: 3,
            merge_dist: 0.5,
            motion: MotionNoise::default(),
            noise_scale: 1.0,
            min_travel: 50.0,
            closure_radius: 3.0,
            closure_heading: std::f64::consts::FRAC_PI_4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamStep {
    pub resampled: bool,
    pub n_eff: f64,
    pub best: usize,
    pub best_pose: Pose2,
    pub landmarks: usize,
}

/// Predict, weigh, normalize and resample as one mapping epoch.
#[derive(Debug, Clone)]
pub struct FastSlam {
    pub set: ParticleSet,
    pub config: SlamConfig,
    gate: f64,
}

impl FastSlam {
    pub fn new(seed: u64, start: Pose2, config: SlamConfig) -> Result<Self> {
        if config.particles == 0 {
            return Err(Error::invalid("particles", "must be positive"));
        }
        let gate = chi2_gate(2, config.gate_p)?;
        Ok(FastSlam { set: ParticleSet::new(seed, config.particles, start), config, gate })
    }

    pub fn step(&mut self, odom: &Odometry, dt: f64, observations: &[ConeObservation]) -> Result<SlamStep> {
        pf_predict(&mut self.set, odom, dt, &self.config.motion, self.config.noise_scale)?;
        let sorted = sorted_by_bearing(observations);
        let (gate, lp0) = (self.gate, self.config.new_landmark_likelihood.ln());
        if !sorted.is_empty() {
            self.set.particles.par_iter_mut().for_each(|p| weigh_in_place(p, &sorted, gate, lp0));
            self.set.normalize()?;
        }
        let n_eff = self.set.effective_sample_size()?;
        let resampled = resample(&mut self.set)?;
        self.set.epoch += 1;
        let best = self.set.best_index().ok_or(Error::Empty("particle set"))?;
        Ok(SlamStep {
            resampled,
            n_eff,
            best,
            best_pose: self.set.particles[best].pose,
            landmarks: self.set.particles[best].landmarks.len(),
        })
    }

    pub fn best(&self) -> &Particle {
        &self.set.particles[self.set.best_index().unwrap_or(0)]
    }

    pub fn extract_map(&self) -> Result<ConeMap> {
        extract_map(&self.set, self.config.min_hits, self.config.merge_dist)
    }
}

#[cfg(test)]
mod tests;
