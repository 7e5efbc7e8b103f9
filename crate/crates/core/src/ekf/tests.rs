use super::*;
use crate::rangebearing::fd;
use crate::rng::SeededRng;
use approx::assert_abs_diff_eq;
use std::f64::consts::PI;

fn state(x: [f64; 6]) -> VehicleState {
    VehicleState::new(0.0, StateVector::from_row_slice(&x), StateCov::identity() * 0.01)
}

fn no_input() -> ImuInput {
    ImuInput { t: 0.0, ax: 0.0, ay: 0.0 }
}

fn random_state(rng: &mut SeededRng) -> StateVector {
    StateVector::from_row_slice(&[
        50.0 * rng.normal(),
        50.0 * rng.normal(),
        2.5 * (2.0 * rng.uniform() - 1.0),
        15.0 * rng.normal(),
        2.0 * rng.normal(),
        rng.normal(),
    ])
}

/// Continuous-time dynamics for the RK4 reference.
fn deriv(x: &StateVector, u: &ImuInput) -> StateVector {
    let (s, c) = x[PSI].sin_cos();
    StateVector::from_row_slice(&[
        x[VX] * c - x[VY] * s,
        x[VX] * s + x[VY] * c,
        x[R],
        u.ax + x[R] * x[VY],
        u.ay - x[R] * x[VX],
        0.0,
    ])
}

fn rk4(x: &StateVector, u: &ImuInput, dt: f64, steps: usize) -> StateVector {
    let h = dt / steps as f64;
    let mut x = *x;
    for _ in 0..steps {
        let k1 = deriv(&x, u);
        let k2 = deriv(&(x + k1 * (h / 2.0)), u);
        let k3 = deriv(&(x + k2 * (h / 2.0)), u);
        let k4 = deriv(&(x + k3 * h), u);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

#[test]
fn predict_at_rest_only_grows_covariance() {
    let s = state([0.0; 6]);
    let q = ProcessNoise::default();
    for &dt in &[0.001, 0.05, 0.1] {
        let n = predict(&s, &no_input(), dt, &q).unwrap();
        assert_eq!(n.x, s.x);
        // at rest with ψ = 0 only the kinematic couplings remain
        let mut f = StateCov::identity();
        f[(PX, VX)] = dt;
        f[(PY, VY)] = dt;
        f[(PSI, R)] = dt;
        let mut expect = f * s.p * f.transpose();
        for i in 0..6 {
            expect[(i, i)] += q.0[i] * dt;
        }
        assert!((n.p - expect).abs().max() < 1e-15);
        assert_abs_diff_eq!(n.t, dt);
    }
}

#[test]
fn predict_straight_line() {
    let s = state([0.0, 0.0, 0.0, 10.0, 0.0, 0.0]);
    let n = predict(&s, &no_input(), 0.1, &ProcessNoise::default()).unwrap();
    assert_abs_diff_eq!(n.x[PX], 1.0, epsilon = 1e-12);
    for i in 1..6 {
        assert_abs_diff_eq!(n.x[i], s.x[i], epsilon = 1e-12);
    }
}

#[test]
fn predict_turning_matches_rk4_to_second_order() {
    let s = state([0.0, 0.0, 0.0, 10.0, 0.0, 1.0]);
    let dt = 0.01;
    let n = predict(&s, &no_input(), dt, &ProcessNoise::default()).unwrap();
    assert_abs_diff_eq!(n.x[VY], -0.1, epsilon = 1e-12);
    let reference = rk4(&s.x, &no_input(), dt, 1000);
    // Euler local truncation error is O(dt²) with O(1) constants here
    for i in 0..6 {
        assert!((n.x[i] - reference[i]).abs() < 2.0 * 10.0 * dt * dt, "component {i}");
    }
    // and it shrinks quadratically
    let half = predict(&s, &no_input(), dt / 2.0, &ProcessNoise::default()).unwrap();
    let ref_half = rk4(&s.x, &no_input(), dt / 2.0, 1000);
    let e1 = (n.x - reference).norm();
    let e2 = (half.x - ref_half).norm();
    assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5, "ratio {}", e1 / e2);
}

#[test]
fn predict_rejects_bad_dt() {
    let s = state([0.0; 6]);
    let q = ProcessNoise::default();
    assert!(predict(&s, &no_input(), 0.0, &q).is_err());
    assert!(predict(&s, &no_input(), -0.01, &q).is_err());
    assert!(predict(&s, &no_input(), 0.1000001, &q).is_err());
    let bad = ImuInput { t: 0.0, ax: f64::NAN, ay: 0.0 };
    assert!(predict(&s, &bad, 0.01, &q).is_err());
}

#[test]
fn process_jacobian_matches_finite_differences() {
    let mut rng = SeededRng::new(21, 0);
    for _ in 0..100 {
        let x = random_state(&mut rng);
        let u = ImuInput { t: 0.0, ax: rng.normal(), ay: rng.normal() };
        let dt = 0.1 * rng.uniform().max(0.01);
        let f = |v: &[f64]| process_model(&StateVector::from_row_slice(v), &u, dt).as_slice().to_vec();
        let num = fd::jacobian(f, x.as_slice(), &[PSI]);
        let ana = process_jacobian(&x, dt);
        let ana = DMatrix::from_column_slice(6, 6, ana.as_slice());
        let err = fd::rel_err(&ana, &num);
        assert!(err < 1e-5, "rel err {err}");
    }
}

#[test]
fn measurement_jacobians_match_finite_differences() {
    let mut rng = SeededRng::new(22, 0);
    for kind in SensorKind::ALL {
        let wrap_rows: Vec<usize> = kind
            .state_rows()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == PSI)
            .map(|(r, _)| r)
            .collect();
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let f = |v: &[f64]| measurement_model(kind, &StateVector::from_row_slice(v)).as_slice().to_vec();
            let num = fd::jacobian(f, x.as_slice(), &wrap_rows);
            assert!(fd::rel_err(&measurement_jacobian(kind), &num) < 1e-5);
        }
    }
}

#[test]
fn perfect_gps_is_accepted_and_shrinks_covariance() {
    let s = state([3.0, -2.0, 0.4, 5.0, 0.0, 0.1]);
    let m = Measurement::gps(0.0, 3.0, -2.0, 0.15).unwrap();
    let h = SensorHealth::new(HealthConfig::default());
    let (n, o) = update(&s, &m, &h, 0.99).unwrap();
    assert!(o.accepted && o.fused);
    assert_eq!(o.d2, 0.0);
    assert_eq!(o.dof, 2);
    assert!((n.x - s.x).norm() < 1e-12);
    assert!(n.p.trace() < s.p.trace());
    assert!(n.p[(PX, PX)] < s.p[(PX, PX)]);
}

#[test]
fn ten_sigma_gps_is_rejected() {
    let s = state([3.0, -2.0, 0.4, 5.0, 0.0, 0.1]);
    let sigma = 0.15;
    let m = Measurement::gps(0.0, 3.0 + 10.0 * sigma, -2.0, sigma).unwrap();
    let h = SensorHealth::new(HealthConfig::default());
    let (n, o) = update(&s, &m, &h, 0.99).unwrap();
    assert!(!o.accepted && !o.fused);
    // S = P + R = 0.01 + 0.0225 per axis
    assert_abs_diff_eq!(o.d2, 1.5f64.powi(2) / 0.0325, epsilon = 1e-9);
    assert!(o.d2 > chi2_gate(2, 0.99).unwrap());
    assert_eq!(n, s);
}

#[test]
fn heading_innovation_wraps() {
    let s = state([0.0, 0.0, -PI + 0.01, 0.0, 0.0, 0.0]);
    let cov = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.01, 0.01, 0.01]));
    let m = Measurement::new(
        0.0,
        SensorKind::VirtualPose,
        DVector::from_column_slice(&[0.0, 0.0, PI]),
        cov,
    )
    .unwrap();
    let h = SensorHealth::new(HealthConfig::default());
    let (n, o) = update(&s, &m, &h, 0.99).unwrap();
    assert_abs_diff_eq!(o.innovation[2], -0.01, epsilon = 1e-12);
    assert!(o.accepted);
    assert!(n.x[PSI] > PI - 0.01 || n.x[PSI] < -PI + 0.01);
}

#[test]
fn unhealthy_sensor_is_evaluated_not_fused() {
    let s = state([0.0; 6]);
    let mut h = SensorHealth::new(HealthConfig::default());
    for _ in 0..26 {
        h.step(false);
    }
    let m = Measurement::gps(0.0, 0.05, 0.0, 0.15).unwrap();
    let (n, o) = update(&s, &m, &h, 0.99).unwrap();
    assert!(o.accepted);
    assert!(!o.fused);
    assert_eq!(n, s);
}

#[test]
fn out_of_order_update_is_an_error_and_estimator_drops_it() {
    let mut s = state([0.0; 6]);
    s.t = 1.0;
    let h = SensorHealth::new(HealthConfig::default());
    let m = Measurement::gps(0.5, 0.0, 0.0, 0.1).unwrap();
    assert!(update(&s, &m, &h, 0.99).is_err());

    let mut est = Estimator::new(s.clone(), EkfConfig::default());
    assert!(est.measure(&m).unwrap().is_none());
    assert_eq!(est.dropped(), 1);
    assert_eq!(est.state(), &s);
}

#[test]
fn singular_innovation_reports_condition() {
    let mut s = state([0.0; 6]);
    s.p = StateCov::zeros();
    let mut m = Measurement::gps(0.0, 0.0, 0.0, 0.1).unwrap();
    // bypass constructor validation to force a collapsed covariance
    m.r = DMatrix::zeros(2, 2);
    let h = SensorHealth::new(HealthConfig::default());
    match update(&s, &m, &h, 0.99) {
        Err(Error::SingularInnovation { condition }) => assert!(condition.is_infinite()),
        other => panic!("expected singular innovation, got {other:?}"),
    }
}

#[test]
fn measurement_validation() {
    assert!(Measurement::new(0.0, SensorKind::GpsPosition, DVector::zeros(3), DMatrix::identity(3, 3)).is_err());
    assert!(Measurement::gps(0.0, 0.0, 0.0, 0.0).is_err());
    assert!(Measurement::gps(f64::NAN, 0.0, 0.0, 0.1).is_err());
}

#[test]
fn diagnostics_flags() {
    let s = state([0.0; 6]);
    let cfg = EkfConfig::default();
    let healths = SensorHealths::new(cfg.health);
    assert!(!diagnostics(&s, &healths, cfg.divergence_trace).divergence);

    let mut big = s.clone();
    big.p[(PX, PX)] = cfg.divergence_trace;
    big.p[(PY, PY)] = cfg.divergence_trace;
    let d = diagnostics(&big, &healths, cfg.divergence_trace);
    assert!(d.divergence);
    assert_abs_diff_eq!(d.position_trace, 2.0 * cfg.divergence_trace);

    // enumerate every status combination against the rule
    for mask in 0u8..16 {
        let mut hs = SensorHealths::new(cfg.health);
        for kind in SensorKind::ALL {
            if mask & (1 << kind.index()) != 0 {
                for _ in 0..26 {
                    hs.get_mut(kind).step(false);
                }
            }
        }
        let gps_bad = mask & (1 << SensorKind::GpsPosition.index()) != 0;
        let vp_bad = mask & (1 << SensorKind::VirtualPose.index()) != 0;
        let d = diagnostics(&s, &hs, cfg.divergence_trace);
        assert_eq!(d.divergence, gps_bad && vp_bad, "mask {mask:04b}");
    }
}

#[test]
fn estimator_substeps_long_gaps() {
    let s = state([0.0, 0.0, 0.0, 10.0, 0.0, 0.0]);
    let mut est = Estimator::new(s, EkfConfig::default());
    est.predict_to(0.35).unwrap();
    assert_abs_diff_eq!(est.state().x[PX], 3.5, epsilon = 1e-9);
    assert_eq!(est.state().t, 0.35);
}

#[test]
fn fault_detection_off_fuses_everything() {
    let s = state([0.0; 6]);
    let cfg = EkfConfig { fault_detection: false, ..EkfConfig::default() };
    let mut est = Estimator::new(s, cfg);
    let m = Measurement::gps(0.0, 10.0, 0.0, 0.15).unwrap();
    let e = est.measure(&m).unwrap().unwrap();
    assert!(!e.outcome.accepted);
    assert!(e.outcome.fused);
    assert!(est.state().x[PX] > 1.0);
    assert!(e.transition.is_none());
}

/// Random predict/update cycles with measurement noise drawn from R.
#[test]
fn covariance_stays_symmetric_psd_and_rejections_are_bit_identical() {
    let mut rng = SeededRng::new(23, 0);
    let q = ProcessNoise::default();
    let mut s = state([0.0, 0.0, 0.3, 8.0, 0.2, 0.1]);
    let h = SensorHealth::new(HealthConfig::default());
    for i in 0..10_000 {
        let u = ImuInput { t: s.t, ax: 0.5 * rng.normal(), ay: 0.5 * rng.normal() };
        s = predict(&s, &u, 0.005 + 0.095 * rng.uniform(), &q).unwrap();
        let kind = SensorKind::ALL[i % 4];
        let truth = s.x + StateVector::from_fn(|_, _| 0.05 * rng.normal());
        let sig = [0.15, 0.05, 0.01, 0.05][i % 4];
        let mut z = measurement_model(kind, &truth);
        for v in z.iter_mut() {
            *v += sig * rng.normal();
        }
        // occasional gross outlier
        if i % 37 == 0 {
            z[0] += 100.0 * sig;
        }
        let r = DMatrix::identity(kind.dof(), kind.dof()) * (sig * sig);
        let m = Measurement::new(s.t, kind, z, r).unwrap();
        let (n, o) = update(&s, &m, &h, 0.99).unwrap();
        if o.fused {
            assert!(n.p.trace() <= s.p.trace() + 1e-12);
        } else {
            assert_eq!(n.x, s.x);
            assert_eq!(n.p, s.p);
        }
        s = n;
        let p = DMatrix::from_column_slice(6, 6, s.p.as_slice());
        // PSD up to roundoff relative to the largest entry
        let tol = 1e-12 * p.abs().max().max(1.0);
        assert!(crate::stats::is_covariance(&p, tol), "cycle {i}: min eigenvalue {}", crate::stats::min_eigenvalue(&p));
    }
}
