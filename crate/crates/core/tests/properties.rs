//! Randomized invariant checks with fixed seeds.

mod common;

use nalgebra::{Point3, UnitQuaternion, Vector3, Vector6};
use patchsim::analytic::{pure_translation_step, TranslationStepInput};
use patchsim::cli;
use patchsim::geom::{evaluate_surface, ContactFrame, Pose};
use patchsim::mncp::{self, fischer_burmeister, MncpProblem, SolverConfig, VariableLayout};
use patchsim::oracle;
use patchsim::stepper::{ContactMode, FrictionParams, MODE_TOL};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32, seed: u64) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let d = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if d.norm() > 0.1 {
            return d.normalize();
        }
    }
}

fn point_in_box(rng: &mut impl Rng, half: f64) -> Point3<f64> {
    Point3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

proptest! {
    #![proptest_config(config(1000, 11))]

    #[test]
    fn gradients_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let surface = common::random_surface(&mut rng);
        let pose = common::random_pose(&mut rng);
        let x = point_in_box(&mut rng, 1.5);
        if let Some(err) = common::gradient_error(&surface, &pose, &x) {
            prop_assert!(err <= 1e-6, "relative error {err:e}");
        }
    }

    #[test]
    fn surface_values_follow_the_frame(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let surface = common::random_surface(&mut rng);
        let pose = common::random_pose(&mut rng);
        let x = point_in_box(&mut rng, 1.5);
        let local = pose.inverse_transform_point(&x);
        prop_assert_eq!(
            evaluate_surface(&surface, &x, &pose),
            evaluate_surface(&surface, &local, &Pose::identity())
        );
    }

    #[test]
    fn wrenches_are_bilinear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = ContactFrame::from_normal(unit_vector(&mut rng));
        let r = point_in_box(&mut rng, 1.0).coords;
        let v = point_in_box(&mut rng, 5.0).coords;
        let w = point_in_box(&mut rng, 5.0).coords;
        let nu = Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z);
        let wr = patchsim::geom::contact_wrenches(&frame.n, &frame.t, &frame.o, &r).unwrap();
        for (wrench, axis) in [(wr.normal, frame.n), (wr.tangent, frame.t), (wr.other, frame.o)] {
            let expected = axis.dot(&v) + r.cross(&axis).dot(&w);
            prop_assert!((wrench.dot(&nu) - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
        prop_assert!((wr.torsion.dot(&nu) - frame.n.dot(&w)).abs() <= 1e-12);
    }

    #[test]
    fn kinematics_keep_the_quaternion_norm_to_first_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = UnitQuaternion::from_scaled_axis(unit_vector(&mut rng) * rng.random_range(0.0..3.1));
        let nu = Vector6::from_fn(|_, _| rng.random_range(-5.0..5.0));
        prop_assert!(common::quaternion_rate_projection(&q, &nu).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(config(10_000, 12))]

    #[test]
    fn fischer_burmeister_zero_iff_complementary(
        a in prop_oneof![Just(0.0), -1e-12..1e-12, -10.0..10.0f64],
        b in prop_oneof![Just(0.0), -1e-12..1e-12, -10.0..10.0f64],
    ) {
        let fb = fischer_burmeister(a, b);
        let m = a.min(b);
        let (lo, hi) = (2.0 - 2f64.sqrt(), 2.0 + 2f64.sqrt());
        prop_assert!(fb.abs() >= lo * m.abs() * (1.0 - 1e-12) - 1e-300);
        prop_assert!(fb.abs() <= hi * m.abs() * (1.0 + 1e-12) + 1e-300);
        if fb.abs() <= 1e-9 {
            prop_assert!(m.abs() <= 1e-9 / lo);
        }
        if m.abs() <= 1e-9 / hi {
            prop_assert!(fb.abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(config(200, 13))]

    #[test]
    fn converged_lcp_roots_replay_within_bounds(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6usize);
        let a = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + nalgebra::DMatrix::identity(n, n);
        let q = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let mut layout = VariableLayout::default();
        layout.push("z", n);
        let p = MncpProblem::new(n, 0, (0..n).collect(), layout, move |x, _, w| {
            let z = nalgebra::DVector::from_column_slice(x);
            let r = &m * z + &q;
            w.copy_from_slice(r.as_slice());
        })
        .unwrap();
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let cfg = SolverConfig::default();
        let sol = mncp::solve(&p, &x0, &cfg);
        prop_assert!(sol.converged(), "residual {:e}", sol.residual_norm);
        prop_assert!(p.violation(&sol.x) <= 10.0 * cfg.tolerance);
        let again = mncp::solve(&p, &x0, &cfg);
        prop_assert!(sol.x.iter().zip(&again.x).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn friction_sum_is_tight_and_opposes_slip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mass = rng.random_range(0.5..10.0);
        let mu = rng.random_range(0.01..1.0);
        let e = rng.random_range(0.5..2.0);
        let n = unit_vector(&mut rng);
        let frame = ContactFrame::from_normal(n);
        let speed = rng.random_range(0.5..5.0);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let velocity = (frame.t * heading.cos() + frame.o * heading.sin()) * speed;
        let push = rng.random_range(-0.1..0.1);
        let applied = -n * mass * 9.8 * 0.01 + frame.t * push;
        let input = TranslationStepInput {
            mass,
            frame,
            velocity,
            applied,
            friction: FrictionParams::new(e, e, 1.0, mu).unwrap(),
        };
        let step = pure_translation_step(&input).unwrap();
        let (magnitude, angle) = common::friction_sum_errors(&input, &step);
        prop_assert!(magnitude <= 1e-12 * (1.0 + mu * step.p_n));
        prop_assert!(angle <= 1e-12, "angle {angle:e}");
    }

    #[test]
    fn oracle_is_symmetric_and_bounded_by_centers(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_body(&mut rng);
        let b = common::random_body(&mut rng);
        let pa = common::random_pose(&mut rng);
        let pb = common::random_pose(&mut rng);
        let tol = 1e-10;
        let ab = oracle::closest_points_bruteforce(&a, &pa, &b, &pb, tol).unwrap();
        let ba = oracle::closest_points_bruteforce(&b, &pb, &a, &pa, tol).unwrap();
        prop_assert!((ab.distance - ba.distance).abs() <= 1e-8, "{} vs {}", ab.distance, ba.distance);
        prop_assert!(a.max_signed_distance(&ba.a2, &pa) <= 1e-8);
        prop_assert!(b.max_signed_distance(&ba.a1, &pb) <= 1e-8);
        let centers = (pa.translation.vector - pb.translation.vector).norm();
        prop_assert!(ab.distance <= centers + 1e-12);
    }
}

proptest! {
    #![proptest_config(config(16, 14))]

    #[test]
    fn stepper_matches_the_closed_form(
        speed in 0.5..5.0f64,
        heading in 0.0..std::f64::consts::TAU,
        mu in 0.02..0.5f64,
    ) {
        let mut s = common::sliding_table([speed * heading.cos(), speed * heading.sin()], 3);
        s.friction.mu = mu;
        let trace = cli::simulate_scenario(&s, None).unwrap();
        prop_assert!(trace.converged());
        let cmp = cli::compare_with_analytic(&s, &trace.steps).unwrap();
        prop_assert!(cmp.analytic_error.is_none());
        prop_assert!(cmp.max_error() <= 1e-6, "{:e}", cmp.max_error());
    }

    #[test]
    fn sliding_dissipates(
        speed in 0.2..3.0f64,
        heading in 0.0..std::f64::consts::TAU,
        mu in 0.05..0.8f64,
    ) {
        let mut s = common::sliding_table([speed * heading.cos(), speed * heading.sin()], 30);
        s.friction.mu = mu;
        let system = s.system().unwrap();
        let trace = cli::simulate_scenario(&s, None).unwrap();
        prop_assert!(trace.converged());
        let speeds = common::tangential_speeds(&trace.steps);
        let mut previous = speed;
        for v in speeds {
            prop_assert!(v <= previous + 1e-12, "{v} after {previous}");
            previous = v;
        }
        prop_assert!(common::dissipation_violation(&trace.steps, &system) <= 1e-9);
    }
}

proptest! {
    #![proptest_config(config(12, 15))]

    #[test]
    fn dropped_bodies_keep_consistent_contact_variables(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_drop_scenario(&mut rng, 0);
        let system = s.system().unwrap();
        let trace = cli::simulate_scenario(&s, None).unwrap();
        for r in &trace.steps {
            // q is orthogonal to G nu and |G nu| = |w| / 2.
            let w = r.state.angular_velocity.norm();
            let expected = (1.0 + 0.25 * (s.h * w).powi(2)).sqrt();
            prop_assert!((r.raw_quaternion_norm - expected).abs() <= 1e-12);
            prop_assert!((r.state.orientation.quaternion().norm() - 1.0).abs() <= 1e-9);
            for (i, p) in r.patches.iter().enumerate() {
                let fr = &system.patches[i].friction;
                prop_assert!(p.p_n >= -1e-8 && p.sigma >= -1e-8);
                prop_assert!(fr.ellipsoid_slack(p.p_n, p.p_t, p.p_o, p.p_r) >= -1e-8);
                if r.modes[i] == ContactMode::Separated {
                    prop_assert!(p.p_n <= MODE_TOL);
                }
            }
        }
        prop_assert!(common::dissipation_violation(&trace.steps, &system) <= 1e-9);
    }

    #[test]
    fn scenarios_survive_a_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_drop_scenario(&mut rng, 0);
        let text = cli::scenario_to_string(&s);
        prop_assert_eq!(cli::parse_scenario(&text).unwrap(), s);
    }
}
