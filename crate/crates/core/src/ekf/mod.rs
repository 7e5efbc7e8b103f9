//! Planar pose-and-velocity EKF.
//!
//! State `[px, py, ψ, vx, vy, r]`: world position, heading, body-frame
//! velocity and yaw rate. Body accelerations from the IMU drive the
//! prediction; GPS position, body velocity, yaw rate and the localizer's
//! virtual pose arrive as measurements. Every measurement is gated on its
//! Mahalanobis distance and every sensor carries a [`SensorHealth`] record
//! that can take it out of the fusion.

mod health;

pub use health::{health_step, HealthConfig, HealthStatus, HealthTransition, SensorHealth};

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};
use crate::stats::{chi2_gate, condition_estimate, symmetrize};

pub const STATE_DIM: usize = 6;
pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateCov = SMatrix<f64, STATE_DIM, STATE_DIM>;

pub const PX: usize = 0;
pub const PY: usize = 1;
pub const PSI: usize = 2;
pub const VX: usize = 3;
pub const VY: usize = 4;
pub const R: usize = 5;

/// Largest admissible prediction step; callers sub-step beyond this.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub t: f64,
    pub x: StateVector,
    pub p: StateCov,
}

impl VehicleState {
    pub fn new(t: f64, mut x: StateVector, mut p: StateCov) -> Self {
        x[PSI] = wrap(x[PSI]);
        symmetrize(&mut p);
        VehicleState { t, x, p }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x[PX], self.x[PY], self.x[PSI])
    }

    pub fn position_trace(&self) -> f64 {
        self.p[(PX, PX)] + self.p[(PY, PY)]
    }

    /// Normalized estimation error squared against a true state.
    pub fn nees(&self, truth: &StateVector) -> f64 {
        let mut e = self.x - truth;
        e[PSI] = wrap(e[PSI]);
        match self.p.cholesky() {
            Some(ch) => e.dot(&ch.solve(&e)),
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuInput {
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
}

/// Continuous-time process noise spectral densities (variance per second).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise(pub [f64; STATE_DIM]);

impl Default for ProcessNoise {
    fn default() -> Self {
        ProcessNoise([0.0, 0.0, 0.0, 0.5 * 0.5, 0.5 * 0.5, 0.3 * 0.3])
    }
}

/// Explicit-Euler step of the kinematic model.
pub fn process_model(x: &StateVector, u: &ImuInput, dt: f64) -> StateVector {
    let (s, c) = x[PSI].sin_cos();
    let (vx, vy, r) = (x[VX], x[VY], x[R]);
    let mut n = *x;
    n[PX] += dt * (vx * c - vy * s);
    n[PY] += dt * (vx * s + vy * c);
    n[PSI] = wrap(x[PSI] + dt * r);
    n[VX] += dt * (u.ax + r * vy);
    n[VY] += dt * (u.ay - r * vx);
    n
}

/// ∂process_model/∂x.
pub fn process_jacobian(x: &StateVector, dt: f64) -> StateCov {
    let (s, c) = x[PSI].sin_cos();
    let (vx, vy, r) = (x[VX], x[VY], x[R]);
    let mut f = StateCov::identity();
    f[(PX, PSI)] = dt * (-vx * s - vy * c);
    f[(PX, VX)] = dt * c;
    f[(PX, VY)] = -dt * s;
    f[(PY, PSI)] = dt * (vx * c - vy * s);
    f[(PY, VX)] = dt * s;
    f[(PY, VY)] = dt * c;
    f[(PSI, R)] = dt;
    f[(VX, VY)] = dt * r;
    f[(VX, R)] = dt * vy;
    f[(VY, VX)] = -dt * r;
    f[(VY, R)] = -dt * vx;
    f
}

pub fn predict(s: &VehicleState, u: &ImuInput, dt: f64, q: &ProcessNoise) -> Result<VehicleState> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::invalid("dt", format!("{dt} not in (0, {MAX_DT}]")));
    }
    if !(u.ax.is_finite() && u.ay.is_finite()) {
        return Err(Error::NonFinite("imu input"));
    }
    let f = process_jacobian(&s.x, dt);
    let x = process_model(&s.x, u, dt);
    let mut p = f * s.p * f.transpose();
    for i in 0..STATE_DIM {
        p[(i, i)] += q.0[i] * dt;
    }
    symmetrize(&mut p);
    Ok(VehicleState { t: s.t + dt, x, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SensorKind {
    GpsPosition,
    BodyVelocity,
    YawRate,
    VirtualPose,
}

impl SensorKind {
    pub const ALL: [SensorKind; 4] = [
        SensorKind::GpsPosition,
        SensorKind::BodyVelocity,
        SensorKind::YawRate,
        SensorKind::VirtualPose,
    ];

    pub fn dof(self) -> usize {
        self.state_rows().len()
    }

    /// State components observed directly by this sensor.
    pub fn state_rows(self) -> &'static [usize] {
        match self {
            SensorKind::GpsPosition => &[PX, PY],
            SensorKind::BodyVelocity => &[VX, VY],
            SensorKind::YawRate => &[R],
            SensorKind::VirtualPose => &[PX, PY, PSI],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SensorKind::GpsPosition => "gps",
            SensorKind::BodyVelocity => "velocity",
            SensorKind::YawRate => "yaw_rate",
            SensorKind::VirtualPose => "virtual_pose",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bears_position(self) -> bool {
        matches!(self, SensorKind::GpsPosition | SensorKind::VirtualPose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub kind: SensorKind,
    pub z: DVector<f64>,
    pub r: DMatrix<f64>,
}

impl Measurement {
    pub fn new(t: f64, kind: SensorKind, z: DVector<f64>, r: DMatrix<f64>) -> Result<Self> {
        let dof = kind.dof();
        if z.len() != dof || r.nrows() != dof || r.ncols() != dof {
            return Err(Error::invalid(
                "measurement",
                format!("{} expects {dof}-dof z and R", kind.name()),
            ));
        }
        if z.iter().chain(r.iter()).any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(Error::NonFinite("measurement"));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::invalid("measurement", "R is not positive definite"));
        }
        Ok(Measurement { t, kind, z, r })
    }

    pub fn gps(t: f64, px: f64, py: f64, sigma: f64) -> Result<Self> {
        Self::diagonal(t, SensorKind::GpsPosition, &[px, py], &[sigma, sigma])
    }

    pub fn body_velocity(t: f64, vx: f64, vy: f64, sigma: f64) -> Result<Self> {
        Self::diagonal(t, SensorKind::BodyVelocity, &[vx, vy], &[sigma, sigma])
    }

    pub fn yaw_rate(t: f64, r: f64, sigma: f64) -> Result<Self> {
        Self::diagonal(t, SensorKind::YawRate, &[r], &[sigma])
    }

    pub fn virtual_pose(t: f64, pose: &Pose2, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            t,
            SensorKind::VirtualPose,
            DVector::from_column_slice(&[pose.x, pose.y, pose.psi]),
            cov,
        )
    }

    fn diagonal(t: f64, kind: SensorKind, z: &[f64], sigma: &[f64]) -> Result<Self> {
        let r = DMatrix::from_diagonal(&DVector::from_iterator(
            sigma.len(),
            sigma.iter().map(|s| s * s),
        ));
        Self::new(t, kind, DVector::from_column_slice(z), r)
    }
}

/// h(x) for a sensor kind.
pub fn measurement_model(kind: SensorKind, x: &StateVector) -> DVector<f64> {
    DVector::from_iterator(kind.dof(), kind.state_rows().iter().map(|&i| x[i]))
}

/// ∂h/∂x for a sensor kind.
pub fn measurement_jacobian(kind: SensorKind) -> DMatrix<f64> {
    let rows = kind.state_rows();
    let mut h = DMatrix::zeros(rows.len(), STATE_DIM);
    for (r, &c) in rows.iter().enumerate() {
        h[(r, c)] = 1.0;
    }
    h
}

/// z − h(x), with heading components wrapped.
pub fn innovation(kind: SensorKind, z: &DVector<f64>, x: &StateVector) -> DVector<f64> {
    let mut nu = z - measurement_model(kind, x);
    for (r, &c) in kind.state_rows().iter().enumerate() {
        if c == PSI {
            nu[r] = wrap(nu[r]);
        }
    }
    nu
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub kind: SensorKind,
    pub t: f64,
    /// The innovation passed the chi-square gate.
    pub accepted: bool,
    /// The measurement was folded into the state.
    pub fused: bool,
    pub d2: f64,
    pub innovation: DVector<f64>,
    pub dof: usize,
}

/// Gated EKF update. Measurements outside the gate, or from a sensor
/// currently marked unhealthy, are evaluated but leave the state untouched.
pub fn update(
    s: &VehicleState,
    m: &Measurement,
    health: &SensorHealth,
    gate_p: f64,
) -> Result<(VehicleState, UpdateOutcome)> {
    let gate = chi2_gate(m.kind.dof(), gate_p)?;
    gated_update(s, m, gate, true, health.is_healthy())
}

/// Shared update path. With `enforce` off every measurement is fused; the
/// gate test is still recorded in the outcome.
pub(crate) fn gated_update(
    s: &VehicleState,
    m: &Measurement,
    gate: f64,
    enforce: bool,
    healthy: bool,
) -> Result<(VehicleState, UpdateOutcome)> {
    if m.t < s.t {
        return Err(Error::invalid(
            "measurement",
            format!("timestamp {} precedes state time {}", m.t, s.t),
        ));
    }
    let h = measurement_jacobian(m.kind);
    let nu = innovation(m.kind, &m.z, &s.x);
    let p = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, s.p.as_slice());
    let ph_t = &p * h.transpose();
    let mut sm = &h * &ph_t + &m.r;
    crate::stats::symmetrize_dyn(&mut sm);
    let chol = sm.clone().cholesky().ok_or_else(|| Error::SingularInnovation {
        condition: condition_estimate(&sm),
    })?;
    let d2 = nu.dot(&chol.solve(&nu)).max(0.0);
    let accepted = d2 <= gate;
    let fuse = !enforce || (accepted && healthy);
    let outcome = UpdateOutcome {
        kind: m.kind,
        t: m.t,
        accepted,
        fused: fuse,
        d2,
        innovation: nu.clone(),
        dof: m.kind.dof(),
    };
    if !fuse {
        return Ok((s.clone(), outcome));
    }

    // K = P Hᵀ S⁻¹, Joseph-form covariance
    let k = chol.solve(&ph_t.transpose()).transpose();
    let dx = &k * &nu;
    let mut x = s.x;
    for i in 0..STATE_DIM {
        x[i] += dx[i];
    }
    x[PSI] = wrap(x[PSI]);
    let ikh = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM) - &k * &h;
    let pd = &ikh * &p * ikh.transpose() + &k * &m.r * k.transpose();
    let mut pn = StateCov::from_column_slice(pd.as_slice());
    symmetrize(&mut pn);
    Ok((VehicleState { t: s.t, x, p: pn }, outcome))
}

/// Health records for all four sensor kinds, indexed by [`SensorKind::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct SensorHealths(pub [SensorHealth; 4]);

impl SensorHealths {
    pub fn new(config: HealthConfig) -> Self {
        SensorHealths(std::array::from_fn(|_| SensorHealth::new(config)))
    }

    pub fn get(&self, kind: SensorKind) -> &SensorHealth {
        &self.0[kind.index()]
    }

    pub fn get_mut(&mut self, kind: SensorKind) -> &mut SensorHealth {
        &mut self.0[kind.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorDiagnostics {
    pub statuses: [(SensorKind, HealthStatus); 4],
    pub divergence: bool,
    pub position_trace: f64,
}

pub fn diagnostics(s: &VehicleState, healths: &SensorHealths, divergence_trace: f64) -> EstimatorDiagnostics {
    let statuses = std::array::from_fn(|i| {
        let kind = SensorKind::ALL[i];
        (kind, healths.get(kind).status())
    });
    let position_trace = s.position_trace();
    let all_position_unhealthy = SensorKind::ALL
        .iter()
        .filter(|k| k.bears_position())
        .all(|k| !healths.get(*k).is_healthy());
    EstimatorDiagnostics {
        statuses,
        divergence: position_trace > divergence_trace || all_position_unhealthy,
        position_trace,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfConfig {
    pub q: ProcessNoise,
    pub gate_p: f64,
    pub health: HealthConfig,
    /// θ_div, m²
    pub divergence_trace: f64,
    /// Gating plus health tracking. Off means every measurement is fused.
    pub fault_detection: bool,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            q: ProcessNoise::default(),
            gate_p: 0.99,
            health: HealthConfig::default(),
            divergence_trace: 25.0,
            fault_detection: true,
        }
    }
}

/// Result of feeding one measurement to an [`Estimator`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub outcome: UpdateOutcome,
    pub transition: Option<HealthTransition>,
}

/// Single-owner estimator: state, sensor health and configuration.
#[derive(Debug, Clone)]
pub struct Estimator {
    state: VehicleState,
    healths: SensorHealths,
    config: EkfConfig,
    last_imu: ImuInput,
    dropped: u64,
}

impl Estimator {
    pub fn new(initial: VehicleState, config: EkfConfig) -> Self {
        let last_imu = ImuInput { t: initial.t, ax: 0.0, ay: 0.0 };
        Estimator {
            state: initial,
            healths: SensorHealths::new(config.health),
            config,
            last_imu,
            dropped: 0,
        }
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn healths(&self) -> &SensorHealths {
        &self.healths
    }

    pub fn config(&self) -> &EkfConfig {
        &self.config
    }

    /// Measurements dropped for arriving out of order.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Propagates to `t` holding the most recent IMU input, sub-stepping at
    /// most [`MAX_DT`] at a time.
    pub fn predict_to(&mut self, t: f64) -> Result<()> {
        let u = self.last_imu;
        while t - self.state.t > 1e-12 {
            let dt = (t - self.state.t).min(MAX_DT);
            self.state = predict(&self.state, &u, dt, &self.config.q)?;
        }
        // pin exactly to the requested timestamp to keep stamps free of drift
        if t > self.state.t {
            self.state.t = t;
        }
        Ok(())
    }

    /// Propagates to the IMU sample's time with the previous input, then
    /// latches the new input for the next interval.
    pub fn imu(&mut self, u: ImuInput) -> Result<()> {
        if u.t < self.state.t {
            self.dropped += 1;
            log::warn!("dropping out-of-order imu sample at t={}", u.t);
            return Ok(());
        }
        self.predict_to(u.t)?;
        self.last_imu = u;
        Ok(())
    }

    /// Predicts to the measurement time and runs the gated update. Returns
    /// `None` for out-of-order measurements, which are dropped.
    pub fn measure(&mut self, m: &Measurement) -> Result<Option<Evaluation>> {
        if m.t < self.state.t {
            self.dropped += 1;
            log::warn!("dropping out-of-order {} measurement at t={}", m.kind.name(), m.t);
            return Ok(None);
        }
        self.predict_to(m.t)?;
        let gate = chi2_gate(m.kind.dof(), self.config.gate_p)?;
        let (state, outcome) = gated_update(
            &self.state,
            m,
            gate,
            self.config.fault_detection,
            self.healths.get(m.kind).is_healthy(),
        )?;
        self.state = state;
        let transition = if self.config.fault_detection {
            self.healths.get_mut(m.kind).step(outcome.accepted)
        } else {
            None
        };
        Ok(Some(Evaluation { outcome, transition }))
    }

    pub fn diagnostics(&self) -> EstimatorDiagnostics {
        diagnostics(&self.state, &self.healths, self.config.divergence_trace)
    }
}

#[cfg(test)]
mod tests;
