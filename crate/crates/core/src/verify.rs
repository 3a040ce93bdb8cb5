//! Post-hoc checks of a solved step: contact points on the boundaries, a
//! common supporting plane at every touching patch, no penetration, and
//! complementarity of the solved impulses.

use nalgebra::{DVector, Point3, Vector3};
use thiserror::Error;

use crate::geom::{ConvexBody, Pose};
use crate::oracle;
use crate::stepper::{ContactMode, ContactSystem, StepResult};

/// Grid level for the plane-separation sample check.
const PLANE_SAMPLE_LEVEL: u32 = 3;
const MAX_PG_ITERATIONS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertificateError {
    #[error("point is {0:e} away from the boundary")]
    NotOnBoundary(f64),
    #[error("normal cones share no direction (residual {0:e})")]
    NoCommonNormal(f64),
    #[error("plane does not separate the bodies (worst violation {0:e})")]
    NotSeparating(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub boundary: f64,
    pub penetration: f64,
    pub hyperplane: f64,
    pub complementarity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            boundary: 1e-6,
            penetration: 1e-6,
            hyperplane: 1e-6,
            complementarity: 1e-8,
        }
    }
}

fn active_normals(body: &ConvexBody, pose: &Pose, x: &Point3<f64>, tol: f64) -> Vec<Vector3<f64>> {
    let values = body.values(x, pose);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    body.gradients(x, pose)
        .into_iter()
        .zip(values)
        .filter(|(g, v)| *v >= max - tol && g.norm() > 0.0)
        .map(|(g, _)| g.normalize())
        .collect()
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(y: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = y.iter().cloned().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    y.map(|v| (v - theta).max(0.0))
}

/// Minimizes `|G w|` over the simplex by accelerated projected gradient.
fn min_norm_on_simplex(generators: &[Vector3<f64>], tol: f64) -> (DVector<f64>, f64) {
    let k = generators.len();
    let apply = |w: &DVector<f64>| -> Vector3<f64> {
        generators.iter().zip(w.iter()).map(|(g, wi)| g * *wi).sum()
    };
    // Unit generators: |G^T G| <= k.
    let step = 1.0 / k as f64;
    let mut w = DVector::from_element(k, 1.0 / k as f64);
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut best = (w.clone(), apply(&w).norm());
    for _ in 0..MAX_PG_ITERATIONS {
        let r = apply(&y);
        let grad = DVector::from_iterator(k, generators.iter().map(|g| g.dot(&r)));
        let next = project_simplex(&(&y - grad * step));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &w) * ((t - 1.0) / t_next);
        w = next;
        t = t_next;
        let norm = apply(&w).norm();
        if norm < best.1 {
            best = (w.clone(), norm);
        }
        if best.1 <= 0.1 * tol {
            break;
        }
    }
    best
}

/// Finds a unit `d` in the normal cone of `a` at `a1` whose negation lies in
/// the normal cone of `b` at `a2`, then checks that the plane through the
/// midpoint with normal `d` separates boundary samples of both bodies.
pub fn separating_hyperplane_certificate(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    a1: &Point3<f64>,
    a2: &Point3<f64>,
    tol: f64,
) -> Result<Vector3<f64>, CertificateError> {
    for (body, pose, x) in [(a, pose_a, a1), (b, pose_b, a2)] {
        let v = body.max_value(x, pose);
        if v.abs() > tol {
            return Err(CertificateError::NotOnBoundary(v.abs()));
        }
    }
    let na = active_normals(a, pose_a, a1, tol);
    let nb = active_normals(b, pose_b, a2, tol);
    let generators: Vec<Vector3<f64>> = na.iter().chain(nb.iter()).cloned().collect();
    let (w, residual) = min_norm_on_simplex(&generators, tol);
    if residual > tol {
        return Err(CertificateError::NoCommonNormal(residual));
    }
    let from_a: Vector3<f64> = na.iter().zip(w.iter()).map(|(g, wi)| g * *wi).sum();
    let from_b: Vector3<f64> = nb
        .iter()
        .zip(w.iter().skip(na.len()))
        .map(|(g, wi)| g * *wi)
        .sum();
    let d = (from_a - from_b).normalize();

    let mid = Point3::from((a1.coords + a2.coords) * 0.5);
    let radius = [a, b]
        .iter()
        .zip([pose_a, pose_b])
        .filter_map(|(body, pose)| body.world_bounds(pose).map(|bb| bb.circumradius()))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let sample = |body: &ConvexBody, pose: &Pose| {
        if body.is_environment() {
            oracle::body_samples_near(body, pose, &mid, radius, PLANE_SAMPLE_LEVEL)
        } else {
            oracle::body_samples(body, pose, PLANE_SAMPLE_LEVEL)
        }
    };
    let worst_a = sample(a, pose_a)
        .iter()
        .map(|x| d.dot(&(x - mid)))
        .fold(0.0f64, f64::max);
    let worst_b = sample(b, pose_b)
        .iter()
        .map(|x| -d.dot(&(x - mid)))
        .fold(0.0f64, f64::max);
    let worst = worst_a.max(worst_b);
    if worst > tol {
        return Err(CertificateError::NotSeparating(worst));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCertificate {
    pub touching: bool,
    /// `|max f(a1)|` on the object body.
    pub boundary_object: f64,
    /// `|max g(a2)|` on the environment body.
    pub boundary_environment: f64,
    /// Present for touching patches whose certificate succeeded.
    pub hyperplane: Option<Vector3<f64>>,
    pub hyperplane_error: Option<CertificateError>,
    pub penetration_depth: f64,
    /// Largest of `|p_n max f(a2)|`, the ellipsoid violation and
    /// `|sigma * slack|`.
    pub complementarity: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepCertificate {
    pub patches: Vec<PatchCertificate>,
    pub passed: bool,
}

impl StepCertificate {
    pub fn max_penetration(&self) -> f64 {
        self.patches
            .iter()
            .map(|p| p.penetration_depth)
            .fold(0.0, f64::max)
    }
}

/// Certifies every patch of a step. Failures are recorded, never raised.
pub fn certify_step(
    result: &StepResult,
    system: &ContactSystem,
    tol: &Tolerances,
) -> StepCertificate {
    let pose = result.state.pose();
    let identity = Pose::identity();
    let mut patches = Vec::with_capacity(result.patches.len());
    for (i, vars) in result.patches.iter().enumerate() {
        let patch = &system.patches[i];
        let touching = result.modes.get(i) == Some(&ContactMode::Touching);
        let boundary_object = patch.object.max_value(&vars.a1, &pose).abs();
        let boundary_environment = patch.environment.max_value(&vars.a2, &identity).abs();
        let penetration_depth = oracle::penetration_depth(
            &patch.object,
            &pose,
            &patch.environment,
            &identity,
            tol.penetration,
        );
        let fr = &patch.friction;
        let slack = fr.ellipsoid_slack(vars.p_n, vars.p_t, vars.p_o, vars.p_r);
        let complementarity = (vars.p_n * patch.object.max_value(&vars.a2, &pose))
            .abs()
            .max((-slack).max(0.0))
            .max((vars.sigma * slack).abs());

        let (hyperplane, hyperplane_error) = if touching {
            match separating_hyperplane_certificate(
                &patch.object,
                &pose,
                &patch.environment,
                &identity,
                &vars.a1,
                &vars.a2,
                tol.hyperplane,
            ) {
                Ok(d) => (Some(d), None),
                Err(e) => (None, Some(e)),
            }
        } else {
            (None, None)
        };
        let boundary_ok =
            !touching || (boundary_object <= tol.boundary && boundary_environment <= tol.boundary);
        let passed = boundary_ok
            && (!touching || hyperplane.is_some())
            && penetration_depth <= tol.penetration
            && complementarity <= tol.complementarity;
        patches.push(PatchCertificate {
            touching,
            boundary_object,
            boundary_environment,
            hyperplane,
            hyperplane_error,
            penetration_depth,
            complementarity,
            passed,
        });
    }
    let passed = patches.iter().all(|p| p.passed);
    StepCertificate { patches, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Translation3, UnitQuaternion};

    fn ground() -> ConvexBody {
        ConvexBody::half_space(Vector3::z(), 0.0).unwrap()
    }

    #[test]
    fn flush_cylinder_on_ground() {
        let leg = ConvexBody::capped_cylinder(0.1, -0.2, 0.0).unwrap();
        let pose = Pose::translation(0.0, 0.0, 0.2);
        let p = Point3::new(0.03, -0.02, 0.0);
        let d = separating_hyperplane_certificate(
            &leg,
            &pose,
            &ground(),
            &Pose::identity(),
            &p,
            &p,
            1e-6,
        )
        .unwrap();
        assert!((d - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9, "{d}");
    }

    #[test]
    fn tilted_cylinder_on_rim() {
        let leg = ConvexBody::capped_cylinder(0.1, -0.2, 0.0).unwrap();
        let tilt = 0.3f64;
        let rot = UnitQuaternion::from_euler_angles(tilt, 0.0, 0.0);
        // Rim point at local (0, -0.1, -0.2) lifted to z = 0.
        let local = Point3::new(0.0, -0.1, -0.2);
        let lifted = rot * local;
        let pose = Pose::from_parts(Translation3::new(0.0, 0.0, -lifted.z), rot);
        let p = pose * local;
        assert!(p.z.abs() < 1e-15);
        let d = separating_hyperplane_certificate(
            &leg,
            &pose,
            &ground(),
            &Pose::identity(),
            &p,
            &p,
            1e-6,
        )
        .unwrap();
        assert!((d.abs() - Vector3::z()).norm() < 1e-6, "{d}");
    }

    #[test]
    fn interpenetrating_sphere_has_no_common_normal() {
        let ball = ConvexBody::sphere(0.5).unwrap();
        let pose = Pose::translation(0.0, 0.0, 0.2);
        // Bottom of the sphere, and a ground point right above the center.
        let a1 = Point3::new(0.0, 0.0, -0.3);
        let a2 = Point3::new(0.0, 0.0, 0.0);
        let a1_top = Point3::new(0.0, 0.0, 0.7);
        assert!(matches!(
            separating_hyperplane_certificate(
                &ball,
                &pose,
                &ground(),
                &Pose::identity(),
                &a1_top,
                &a2,
                1e-6
            ),
            Err(CertificateError::NoCommonNormal(_))
        ));
        assert!(matches!(
            separating_hyperplane_certificate(
                &ball,
                &pose,
                &ground(),
                &Pose::identity(),
                &a1,
                &a2,
                1e-6
            ),
            Err(CertificateError::NotSeparating(_))
        ));
    }

    #[test]
    fn off_boundary_points_rejected() {
        let ball = ConvexBody::sphere(0.5).unwrap();
        let pose = Pose::translation(0.0, 0.0, 1.0);
        let inside = Point3::new(0.0, 0.0, 1.0);
        let on_ground = Point3::origin();
        assert!(matches!(
            separating_hyperplane_certificate(
                &ball,
                &pose,
                &ground(),
                &Pose::identity(),
                &inside,
                &on_ground,
                1e-6
            ),
            Err(CertificateError::NotOnBoundary(_))
        ));
    }

    fn resting_table() -> (ContactSystem, StepResult) {
        use crate::geom::{InertialParams, RigidState};
        use crate::mncp::SolverConfig;
        use crate::stepper::{initial_guess, step, AppliedWrench, FrictionParams, Patch};
        let patches = [210.0f64, 330.0, 90.0]
            .iter()
            .map(|deg| {
                let a = deg.to_radians();
                Patch {
                    object: ConvexBody::capped_cylinder(0.1, -0.3, -0.1)
                        .unwrap()
                        .with_offset(Pose::translation(0.3 * a.cos(), 0.3 * a.sin(), 0.0)),
                    environment: ground(),
                    friction: FrictionParams::isotropic(0.12),
                }
            })
            .collect();
        let inertia = InertialParams::new(5.0, nalgebra::Matrix3::identity() * 0.8).unwrap();
        let system = ContactSystem::new(inertia, 9.8, patches).unwrap();
        let rest = RigidState::at_rest(Vector3::new(0.0, 0.0, 0.3));
        let warm = initial_guess(&rest, &system, 0.01, None).unwrap();
        let r = step(
            &rest,
            &system,
            &AppliedWrench::default(),
            0.01,
            &SolverConfig::default(),
            &warm,
        )
        .unwrap();
        (system, r)
    }

    #[test]
    fn resting_table_certifies() {
        let (system, r) = resting_table();
        let c = certify_step(&r, &system, &Tolerances::default());
        assert!(c.passed, "{c:?}");
        for p in &c.patches {
            let d = p.hyperplane.unwrap();
            assert!((d.abs() - Vector3::z()).norm() < 1e-9, "{d}");
        }
    }

    #[test]
    fn airborne_step_passes_vacuously() {
        let (system, mut r) = resting_table();
        r.state.position.z += 0.5;
        for (p, m) in r.patches.iter_mut().zip(r.modes.iter_mut()) {
            p.a1.z += 0.5;
            p.p_n = 0.0;
            *m = ContactMode::Separated;
        }
        let c = certify_step(&r, &system, &Tolerances::default());
        assert!(c.passed);
        assert!(c
            .patches
            .iter()
            .all(|p| !p.touching && p.hyperplane.is_none()));
    }

    #[test]
    fn injected_penetration_is_caught() {
        let (system, mut r) = resting_table();
        r.state.position.z -= 1e-3;
        let c = certify_step(&r, &system, &Tolerances::default());
        assert!(!c.passed);
        assert!(c.max_penetration() >= 9e-4, "{}", c.max_penetration());
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&DVector::from_vec(vec![0.5, 0.5, 0.5]));
        assert!((p.sum() - 1.0).abs() < 1e-15);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        let p = project_simplex(&DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }
}
