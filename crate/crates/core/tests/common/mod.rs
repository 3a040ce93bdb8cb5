#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{Point3, UnitQuaternion, Vector3, Vector6};
use patchsim::analytic::{TranslationStep, TranslationStepInput};
use patchsim::cli::{self, BodySpec, PartSpec, Scenario, ShapeSpec};
use patchsim::geom::{
    evaluate_surface, kinematic_matrix, surface_gradient, ConvexBody, ConvexSurface, Pose,
};
use patchsim::oracle;
use patchsim::stepper::StepResult;
use rand::Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn example(n: u32) -> Scenario {
    cli::load_scenario(&scenario_path(&format!("example{n}.toml"))).unwrap()
}

/// Example 1 with a different start velocity and horizon.
pub fn sliding_table(v: [f64; 2], steps: usize) -> Scenario {
    let mut s = example(1);
    s.initial.nu = [v[0], v[1], 0.0, 0.0, 0.0, 0.0];
    s.steps = steps;
    s
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let rot = UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..3.0));
    Pose::from_parts(
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .into(),
        rot,
    )
}

pub fn random_surface(rng: &mut impl Rng) -> ConvexSurface {
    let dir = loop {
        let d = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if d.norm() > 0.1 {
            break d.normalize();
        }
    };
    let c = Point3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    match rng.random_range(0..4) {
        0 => ConvexSurface::half_space(dir, rng.random_range(-1.0..1.0)).unwrap(),
        1 => ConvexSurface::cylinder(c, dir, rng.random_range(0.05..1.0)).unwrap(),
        2 => ConvexSurface::sphere(c, rng.random_range(0.05..1.0)).unwrap(),
        _ => ConvexSurface::cap(
            dir,
            rng.random_range(-1.0..1.0),
            if rng.random_bool(0.5) {
                patchsim::geom::CapSide::Lower
            } else {
                patchsim::geom::CapSide::Upper
            },
        )
        .unwrap(),
    }
}

/// Relative error between the analytic gradient and central differences,
/// or `None` at a singular point.
pub fn gradient_error(surface: &ConvexSurface, pose: &Pose, x: &Point3<f64>) -> Option<f64> {
    let g = surface_gradient(surface, x, pose).ok()?;
    if g.norm() < 1e-3 {
        return None;
    }
    let h = 1e-5;
    let mut fd = Vector3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        fd[k] = (evaluate_surface(surface, &(x + e), pose)
            - evaluate_surface(surface, &(x - e), pose))
            / (2.0 * h);
    }
    Some((fd - g).norm() / g.norm())
}

/// `q . (quaternion rows of G nu)`, zero when G preserves the norm to first order.
pub fn quaternion_rate_projection(q: &UnitQuaternion<f64>, nu: &Vector6<f64>) -> f64 {
    let mut c = nalgebra::SVector::<f64, 7>::zeros();
    c[3] = q.w;
    c[4] = q.i;
    c[5] = q.j;
    c[6] = q.k;
    let qd = kinematic_matrix(&c) * nu;
    c[3] * qd[3] + c[4] * qd[4] + c[5] * qd[5] + c[6] * qd[6]
}

/// Deviations of an analytic step from the friction-sum identities:
/// magnitude error and the angle between the friction sum and the negated
/// pre-slip vector.
pub fn friction_sum_errors(input: &TranslationStepInput, r: &TranslationStep) -> (f64, f64) {
    let f = &input.friction;
    let magnitude = (r.p_t / f.e_t).hypot(r.p_o / f.e_o) - f.mu * r.p_n;
    let s_t = input.mass * input.frame.t.dot(&input.velocity) + input.frame.t.dot(&input.applied);
    let s_o = input.mass * input.frame.o.dot(&input.velocity) + input.frame.o.dot(&input.applied);
    let p = nalgebra::Vector2::new(r.p_t, r.p_o);
    let s = nalgebra::Vector2::new(s_t, s_o);
    let angle = if p.norm() == 0.0 {
        0.0
    } else if p.dot(&s) >= 0.0 {
        std::f64::consts::PI
    } else {
        (p.perp(&s) / (p.norm() * s.norm())).abs().asin()
    };
    (magnitude.abs(), angle)
}

/// Planar speed of every step of a trajectory.
pub fn tangential_speeds(steps: &[StepResult]) -> Vec<f64> {
    steps
        .iter()
        .map(|r| r.state.linear_velocity.xy().norm())
        .collect()
}

/// Worst violation of the sign condition `(p_t, p_o) . (t v, o v) <= 0` at
/// slipping patches, with `v` the end-of-step velocity of the object at `a1`.
pub fn dissipation_violation(
    steps: &[StepResult],
    system: &patchsim::stepper::ContactSystem,
) -> f64 {
    let mut worst = 0.0f64;
    for r in steps {
        for (i, p) in r.patches.iter().enumerate() {
            if p.sigma <= 1e-6 {
                continue;
            }
            let f = system.frame(i);
            let arm = p.a1 - Point3::from(r.state.position);
            let v = r.state.linear_velocity + r.state.angular_velocity.cross(&arm);
            worst = worst.max(p.p_t * f.t.dot(&v) + p.p_o * f.o.dot(&v));
        }
    }
    worst
}

fn inertia_of(shape: &ShapeSpec, mass: f64) -> [[f64; 3]; 3] {
    let d = match shape {
        ShapeSpec::Sphere { radius } => {
            let i = 0.4 * mass * radius * radius;
            [i, i, i]
        }
        ShapeSpec::Cuboid { half } => {
            let [a, b, c] = half.map(|v| 2.0 * v);
            [
                mass * (b * b + c * c) / 12.0,
                mass * (a * a + c * c) / 12.0,
                mass * (a * a + b * b) / 12.0,
            ]
        }
        ShapeSpec::CappedCylinder {
            radius,
            bottom,
            top,
        } => {
            let l = top - bottom;
            let side = mass * (3.0 * radius * radius + l * l) / 12.0;
            [side, side, 0.5 * mass * radius * radius]
        }
    };
    [[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]]
}

/// A single body or the table, dropped from up to 2 cm or sliding, with a
/// random tilt, spin and friction coefficient.
pub fn random_drop_scenario(rng: &mut impl Rng, index: usize) -> Scenario {
    let mut s = example(1);
    s.name = format!("random-{index}");
    s.notes.clear();
    s.steps = 40;
    s.experiment = Default::default();
    s.friction.mu = rng.random_range(0.05..0.8);
    let mass = rng.random_range(0.5..5.0);
    let kind = rng.random_range(0..4);
    let shape = match kind {
        0 => ShapeSpec::Sphere {
            radius: rng.random_range(0.05..0.2),
        },
        1 => ShapeSpec::Cuboid {
            half: [
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
            ],
        },
        2 => {
            let l = rng.random_range(0.05..0.3);
            ShapeSpec::CappedCylinder {
                radius: rng.random_range(0.05..0.15),
                bottom: -l / 2.0,
                top: l / 2.0,
            }
        }
        _ => ShapeSpec::Sphere { radius: 0.0 },
    };
    if kind < 3 {
        s.body = BodySpec {
            mass,
            inertia: inertia_of(&shape, mass),
            parts: vec![PartSpec {
                shape,
                offset: [0.0; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                friction: None,
            }],
        };
    } else {
        s.body.mass = mass;
        for r in 0..3 {
            s.body.inertia[r][r] *= mass / 5.0;
        }
    }

    let tilt = if kind == 0 {
        0.0
    } else {
        rng.random_range(0.0..0.3)
    };
    let axis_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let rot = UnitQuaternion::from_scaled_axis(
        Vector3::new(axis_angle.cos(), axis_angle.sin(), 0.0) * tilt,
    ) * UnitQuaternion::from_scaled_axis(Vector3::z() * yaw);
    let q = rot.quaternion();
    s.initial.q = [0.0, 0.0, 0.0, q.w, q.i, q.j, q.k];

    // Lift the body so its lowest point sits `drop` above the ground.
    let system = s.system().unwrap();
    let pose = Pose::from_parts(Vector3::zeros().into(), rot);
    let lowest = system
        .patches
        .iter()
        .map(|p| {
            let ground = ConvexBody::half_space(Vector3::z(), -10.0).unwrap();
            let r = oracle::closest_points_bruteforce(
                &p.object,
                &pose,
                &ground,
                &Pose::identity(),
                1e-12,
            )
            .unwrap();
            r.a1.z
        })
        .fold(f64::INFINITY, f64::min);
    let drop = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.0..0.02)
    };
    s.initial.q[2] = drop - lowest;

    let speed = rng.random_range(0.0..1.0);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let spin = if kind == 0 {
        0.0
    } else {
        rng.random_range(-1.0..1.0)
    };
    s.initial.nu = [
        speed * heading.cos(),
        speed * heading.sin(),
        0.0,
        0.0,
        0.0,
        spin,
    ];
    s
}

pub fn random_body(rng: &mut impl Rng) -> ConvexBody {
    match rng.random_range(0..3) {
        0 => ConvexBody::sphere(rng.random_range(0.1..0.5)).unwrap(),
        1 => ConvexBody::cuboid(Vector3::new(
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
        ))
        .unwrap(),
        _ => ConvexBody::capped_cylinder(
            rng.random_range(0.1..0.3),
            -rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
        )
        .unwrap(),
    }
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..3.0))
}

/// Two bounded bodies at poses whose oracle distance is at least 1 mm.
pub fn random_separated_pair(rng: &mut impl Rng) -> (ConvexBody, Pose, ConvexBody, Pose) {
    loop {
        let a = random_body(rng);
        let b = random_body(rng);
        let pose_a = Pose::from_parts(
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
            .into(),
            random_rotation(rng),
        );
        let dir = loop {
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if d.norm() > 0.1 {
                break d.normalize();
            }
        };
        let pose_b = Pose::from_parts(
            (pose_a.translation.vector + dir * rng.random_range(0.5..1.5)).into(),
            random_rotation(rng),
        );
        let separated = oracle::closest_points_bruteforce(&a, &pose_a, &b, &pose_b, 1e-10)
            .is_ok_and(|r| r.distance > 1e-3);
        if separated {
            return (a, pose_a, b, pose_b);
        }
    }
}
