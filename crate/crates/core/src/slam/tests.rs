use super::*;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn obs(range: f64, bearing: f64) -> ConeObservation {
    ConeObservation::new(0.0, range, bearing, 0.05 + 0.01 * range, 0.0175)
}

fn exact_obs(pose: &Pose2, cone: &Point2) -> ConeObservation {
    let z = rb::predict(pose, cone);
    obs(z.x, z.y)
}

#[test]
fn landmark_init_covariance_matches_monte_carlo() {
    let pose = Pose2::new(1.0, -2.0, 0.7);
    let o = obs(8.0, 0.4);
    let lm = landmark_init(&pose, &o);
    let (sr, sb) = (o.r[(0, 0)].sqrt(), o.r[(1, 1)].sqrt());
    let mut rng = SeededRng::new(3, 0);
    let n = 20_000;
    let samples: Vec<Point2> = (0..n)
        .map(|_| rb::backproject(&pose, o.range + sr * rng.normal(), o.bearing + sb * rng.normal()))
        .collect();
    let mean = samples.iter().fold(Point2::zeros(), |a, p| a + p) / n as f64;
    let cov = samples.iter().fold(Matrix2::zeros(), |a, p| a + (p - mean) * (p - mean).transpose()) / (n - 1) as f64;
    let rel = (cov - lm.sigma).norm() / lm.sigma.norm();
    assert!(rel < 0.15, "relative covariance error {rel}");
    assert!((mean - lm.mu).norm() < 0.02);
    assert_eq!(lm.hits, 1);
}

#[test]
fn systematic_offspring_counts_are_floor_or_ceil() {
    let mut rng = SeededRng::new(5, 0);
    for _ in 0..200 {
        let n = 1 + (rng.uniform() * 300.0) as usize;
        let w: Vec<f64> = (0..n).map(|_| rng.uniform().powi(3)).collect();
        let total: f64 = w.iter().sum();
        let idx = systematic_indices(&w, rng.uniform());
        assert_eq!(idx.len(), n);
        assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        let mut counts = vec![0usize; n];
        for i in idx {
            counts[i] += 1;
        }
        for (c, wi) in counts.iter().zip(&w) {
            let expect = n as f64 * wi / total;
            assert!((*c as f64 - expect).abs() < 1.0 + 1e-9, "count {c} vs {expect}");
        }
    }
}

#[test]
fn log_sum_exp_survives_extreme_weights() {
    let lw = [-1e4, -1e4 - 1.0, -2e4];
    let w = normalized_weights(lw.iter().copied()).unwrap();
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(w[0] / w[1], std::f64::consts::E, epsilon = 1e-9);
    assert!(normalized_weights([f64::NEG_INFINITY, f64::NAN].iter().copied()).is_err());
}

#[test]
fn resample_rejects_degenerate_weights() {
    let mut ps = ParticleSet::new(1, 4, Pose2::IDENTITY);
    for p in &mut ps.particles {
        p.log_weight = f64::NEG_INFINITY;
    }
    assert!(matches!(resample(&mut ps), Err(Error::DegenerateWeights(_))));
}

#[test]
fn resample_skipped_when_weights_are_even() {
    let mut ps = ParticleSet::new(1, 10, Pose2::IDENTITY);
    let before = ps.clone();
    assert!(!resample(&mut ps).unwrap());
    assert_eq!(ps, before);
}

#[test]
fn resampling_copies_ancestors_and_gives_fresh_streams() {
    let mut ps = ParticleSet::new(9, 6, Pose2::IDENTITY);
    for (i, p) in ps.particles.iter_mut().enumerate() {
        p.pose.x = i as f64;
        p.log_weight = if i == 2 { 0.0 } else { -50.0 };
    }
    assert!(resample(&mut ps).unwrap());
    let streams: std::collections::BTreeSet<u64> = ps.particles.iter().map(|p| p.rng_stream()).collect();
    assert_eq!(streams.len(), 6);
    assert!(ps.particles.iter().all(|p| p.pose.x == 2.0));
    assert_abs_diff_eq!(ps.effective_sample_size().unwrap(), 6.0, epsilon = 1e-9);
}

#[test]
fn predict_mean_follows_odometry() {
    let n = 10_000;
    let mut ps = ParticleSet::new(2, n, Pose2::IDENTITY);
    let odom = Odometry { dx: 0.5, dy: 0.02, dpsi: 0.03 };
    let noise = MotionNoise::default();
    pf_predict(&mut ps, &odom, 0.1, &noise, 1.0).unwrap();
    let (st, sr) = noise.sigmas(&odom, 0.1, 1.0);
    let mean = |f: &dyn Fn(&Particle) -> f64| ps.particles.iter().map(f).sum::<f64>() / n as f64;
    let se = |s: f64| 3.0 * s / (n as f64).sqrt();
    assert!((mean(&|p| p.pose.x) - odom.dx).abs() < se(st) + 1e-3);
    assert!((mean(&|p| p.pose.y) - odom.dy).abs() < se(st) + 1e-3);
    assert!((mean(&|p| p.pose.psi) - odom.dpsi).abs() < se(sr));
    assert!(pf_predict(&mut ps, &odom, 0.0, &noise, 1.0).is_err());
}

#[test]
fn zero_noise_predict_is_composition() {
    let mut ps = ParticleSet::new(2, 3, Pose2::new(1.0, 2.0, 0.5));
    let odom = Odometry { dx: 0.5, dy: 0.0, dpsi: 0.1 };
    pf_predict(&mut ps, &odom, 0.1, &MotionNoise::default(), 0.0).unwrap();
    let expect = Pose2::new(1.0, 2.0, 0.5).compose(&odom.as_pose());
    assert!(ps.particles.iter().all(|p| p.pose == expect));
}

#[test]
fn association_matches_nearby_and_spawns_far() {
    let mut p = Particle::new(Pose2::IDENTITY, 0.0, SeededRng::new(0, 0));
    let cone = Point2::new(6.0, 1.0);
    p.landmarks.push(landmark_init(&p.pose, &exact_obs(&p.pose, &cone)));
    match associate(&p, &exact_obs(&p.pose, &(cone + Point2::new(0.05, 0.0))), 0.99).unwrap() {
        Association::Existing { id, d2, .. } => {
            assert_eq!(id, 0);
            assert!(d2 < 1.0);
        }
        Association::New => panic!("expected a match"),
    }
    let far = exact_obs(&p.pose, &Point2::new(6.0, -3.0));
    assert_eq!(associate(&p, &far, 0.99).unwrap(), Association::New);
}

#[test]
fn association_prefers_most_likely_landmark() {
    let mut p = Particle::new(Pose2::IDENTITY, 0.0, SeededRng::new(0, 0));
    for c in [Point2::new(5.0, 0.3), Point2::new(5.0, 0.0), Point2::new(5.0, -0.3)] {
        p.landmarks.push(landmark_init(&p.pose, &exact_obs(&p.pose, &c)));
    }
    match associate(&p, &exact_obs(&p.pose, &Point2::new(5.0, -0.02)), 0.99).unwrap() {
        Association::Existing { id, .. } => assert_eq!(id, 1),
        Association::New => panic!("expected a match"),
    }
}

#[test]
fn weigh_appends_and_never_removes() {
    let mut p = Particle::new(Pose2::IDENTITY, 0.0, SeededRng::new(0, 0));
    let cones = [Point2::new(4.0, 2.0), Point2::new(7.0, -1.0)];
    let o: Vec<_> = cones.iter().map(|c| exact_obs(&p.pose, c)).collect();
    p = weigh_and_update(&p, &o, 0.99, 1e-4).unwrap();
    assert_eq!(p.landmarks.len(), 2);
    assert_abs_diff_eq!(p.log_weight, 2.0 * 1e-4f64.ln(), epsilon = 1e-12);
    let before = p.landmarks.clone();
    let q = weigh_and_update(&p, &o, 0.99, 1e-4).unwrap();
    assert_eq!(q.landmarks.len(), 2);
    for (a, b) in q.landmarks.iter().zip(&before) {
        assert_eq!(a.hits, b.hits + 1);
        assert!(a.sigma.trace() < b.sigma.trace());
    }
    assert!(q.log_weight > p.log_weight);
}

/// With one particle, no motion noise and exact observations, the map is
/// the dead-reckoned back-projection of each cone's first sighting.
#[test]
fn single_particle_reproduces_dead_reckoning() {
    let cones: Vec<Point2> = (0..12)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / 12.0;
            Point2::new(10.0 * a.cos(), 10.0 * a.sin())
        })
        .collect();
    let mut ps = ParticleSet::new(4, 1, Pose2::new(8.0, 0.0, std::f64::consts::FRAC_PI_2));
    let odom = Odometry { dx: 0.4, dy: 0.0, dpsi: 0.05 };
    let mut oracle_pose = ps.particles[0].pose;
    let mut oracle_map: Vec<Option<Point2>> = vec![None; cones.len()];
    let mut ids: Vec<Option<usize>> = vec![None; cones.len()];
    for _ in 0..120 {
        pf_predict(&mut ps, &odom, 0.1, &MotionNoise::default(), 0.0).unwrap();
        oracle_pose = oracle_pose.compose(&odom.as_pose());
        let p = &mut ps.particles[0];
        assert_eq!(p.pose, oracle_pose);
        for (k, c) in cones.iter().enumerate() {
            let z = rb::predict(&oracle_pose, c);
            if z.x > 6.0 {
                continue;
            }
            let o = obs(z.x, z.y);
            let a = match ids[k] {
                Some(id) => {
                    let (nu, s, _) = innovation_terms(&p.pose, &o, &p.landmarks[id].mu, &p.landmarks[id].sigma);
                    let (d2, ll) = rb::gaussian_log_likelihood(&nu, &s).unwrap();
                    Association::Existing { id, d2, log_likelihood: ll }
                }
                None => {
                    ids[k] = Some(p.landmarks.len());
                    oracle_map[k] = Some(Point2::new(
                        oracle_pose.x + z.x * (oracle_pose.psi + z.y).cos(),
                        oracle_pose.y + z.x * (oracle_pose.psi + z.y).sin(),
                    ));
                    Association::New
                }
            };
            apply_association(p, &o, a, 1e-4f64.ln());
        }
    }
    let p = &ps.particles[0];
    assert!(ids.iter().filter(|i| i.is_some()).count() >= 6);
    for (k, id) in ids.iter().enumerate() {
        if let Some(id) = id {
            let m = oracle_map[k].unwrap();
            assert!((p.landmarks[*id].mu - m).norm() < 1e-9);
            assert!((p.landmarks[*id].mu - cones[k]).norm() < 1e-9);
        }
    }
}

fn circle_scene() -> (Vec<Point2>, Vec<Pose2>) {
    let cones: Vec<Point2> = (0..24)
        .flat_map(|i| {
            let a = std::f64::consts::TAU * i as f64 / 24.0;
            [Point2::new(12.0 * a.cos(), 12.0 * a.sin()), Point2::new(17.0 * a.cos(), 17.0 * a.sin())]
        })
        .collect();
    let poses = (0..300)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 300.0;
            Pose2::new(14.5 * a.cos(), 14.5 * a.sin(), a + std::f64::consts::FRAC_PI_2)
        })
        .collect();
    (cones, poses)
}

fn run_slam(seed: u64, particles: usize) -> FastSlam {
    run_slam_scaled(seed, particles, 1.0)
}

fn run_slam_scaled(seed: u64, particles: usize, noise_scale: f64) -> FastSlam {
    let (cones, poses) = circle_scene();
    let cfg = SlamConfig { particles, noise_scale, ..Default::default() };
    let mut slam = FastSlam::new(seed, poses[0], cfg).unwrap();
    let mut rng = SeededRng::new(seed, 1000);
    for w in poses.windows(2) {
        let d = w[0].inverse().compose(&w[1]);
        let odom = Odometry { dx: d.x, dy: d.y, dpsi: d.psi };
        let o: Vec<_> = cones
            .iter()
            .filter_map(|c| {
                let z = rb::predict(&w[1], c);
                (z.x < 10.0 && z.y.abs() < 2.0).then(|| {
                    let sr = 0.05 + 0.01 * z.x;
                    obs(z.x + sr * rng.normal(), z.y + 0.0175 * rng.normal())
                })
            })
            .collect();
        slam.step(&odom, 0.1, &o).unwrap();
    }
    slam
}

#[test]
fn maps_a_static_scene() {
    let (cones, _) = circle_scene();
    let slam = run_slam(11, 50);
    let map = slam.extract_map().unwrap();
    let mut sq = 0.0;
    for m in &map.cones {
        let d = cones.iter().map(|c| (c - m).norm()).fold(f64::INFINITY, f64::min);
        assert!(d < 0.5, "stray landmark {d}");
        sq += d * d;
    }
    let rmse = (sq / map.len() as f64).sqrt();
    assert!(map.len() >= 40, "only {} cones mapped", map.len());
    assert!(rmse < 0.3, "rmse {rmse}");
}

#[test]
fn deterministic_across_thread_counts() {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_slam(7, 30));
    let b = four.install(|| run_slam(7, 30));
    assert_eq!(a.set, b.set);
    assert_ne!(run_slam(8, 30).set, a.set);
}

#[test]
fn extract_map_filters_and_merges() {
    let mut ps = ParticleSet::new(0, 2, Pose2::IDENTITY);
    let lm = |x: f64, y: f64, hits| Landmark { mu: Point2::new(x, y), sigma: Matrix2::identity() * 0.01, hits };
    ps.particles[1].log_weight = 1.0;
    ps.particles[1].landmarks = vec![lm(0.0, 0.0, 3), lm(0.3, 0.0, 6), lm(5.0, 0.0, 2), lm(9.0, 0.0, 4)];
    let map = extract_map(&ps, 3, 0.5).unwrap();
    assert_eq!(map.source, 1);
    assert_eq!(map.len(), 2);
    assert_abs_diff_eq!(map.cones[0].x, 0.2, epsilon = 1e-12);
    assert_eq!(map.hits, vec![9, 4]);
    assert_eq!(map.cones[1], Point2::new(9.0, 0.0));
}

#[test]
fn cone_map_csv_round_trip() {
    let map = ConeMap { cones: vec![Point2::new(1.5, -2.25), Point2::new(0.1, 3.0)], hits: vec![3, 7], source: 0 };
    let mut buf = Vec::new();
    map.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x,y,hits\n"));
    let back = ConeMap::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, map);
    assert_eq!(back.checksum(), map.checksum());
    assert!(ConeMap::read_csv("a,b\n1,2\n".as_bytes()).is_err());
}

#[test]
fn loop_closure_needs_travel_proximity_and_heading() {
    let start = Pose2::IDENTITY;
    let lap: Vec<Pose2> = (0..=100)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 100.0;
            Pose2::new(10.0 * a.sin(), 10.0 - 10.0 * a.cos(), a)
        })
        .collect();
    assert!(detect_loop_closure(&lap, &start, 50.0, 3.0, std::f64::consts::FRAC_PI_4));
    assert!(!detect_loop_closure(&lap[..50], &start, 50.0, 3.0, std::f64::consts::FRAC_PI_4));
    assert!(!detect_loop_closure(&lap, &start, 80.0, 3.0, std::f64::consts::FRAC_PI_4));
    let mut reversed = lap.clone();
    reversed.last_mut().unwrap().psi = std::f64::consts::PI;
    assert!(!detect_loop_closure(&reversed, &start, 50.0, 3.0, std::f64::consts::FRAC_PI_4));
    assert!(!detect_loop_closure(&[], &start, 0.0, 3.0, 1.0));
}

#[test]
fn odometry_accumulates_by_composition() {
    let mut acc = Odometry::default();
    let step = Odometry { dx: 1.0, dy: 0.0, dpsi: std::f64::consts::FRAC_PI_2 };
    acc.accumulate(&step);
    acc.accumulate(&step);
    assert_abs_diff_eq!(acc.dx, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(acc.dy, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(acc.dpsi, std::f64::consts::PI, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn landmark_updates_keep_covariance_psd_and_shrinking(
        range in 1.0f64..12.0,
        bearing in -1.5f64..1.5,
        noise in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..20),
    ) {
        let pose = Pose2::new(0.3, -0.2, 0.1);
        let o = obs(range, bearing);
        let mut lm = landmark_init(&pose, &o);
        for (a, b) in noise {
            let z = obs(range + 0.1 * a, bearing + 0.02 * b);
            let next = landmark_update(&lm, &z, &pose).unwrap();
            prop_assert!(next.sigma.trace() <= lm.sigma.trace() + 1e-15);
            let eig = next.sigma.symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
            prop_assert_eq!(next.sigma[(0, 1)], next.sigma[(1, 0)]);
            lm = next;
        }
    }

    #[test]
    fn normalized_weights_sum_to_one(lw in prop::collection::vec(-800.0f64..50.0, 1..100)) {
        let w = normalized_weights(lw.iter().copied()).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= lw.len() as f64 + 1e-9);
    }
}
