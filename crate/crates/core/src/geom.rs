//! Convex body geometry, rigid poses and quaternion kinematics.
//!
//! A convex body is the intersection of smooth convex inequalities
//! `f(x) <= 0`, each expressed in the body's own frame. Quadratic forms are
//! used for the curved surfaces so that gradients stay polynomial:
//!
//! ```text
//! half-space   f = n.x - d
//! cylinder     f = |x - proj_axis(x)|^2 - r^2
//! sphere       f = |x - c|^2 - r^2
//! cap          f = +/-(a.x - b)
//! ```
//!
//! Objects are unions of such bodies; every body carries a fixed offset from
//! its owning object's frame, and body-level queries take the object's pose.

use nalgebra::{
    Isometry3, Matrix3, Point3, Quaternion, SMatrix, SVector, Translation3, UnitQuaternion,
    Vector3, Vector6,
};
use thiserror::Error;

/// Rigid transform from a local frame to the world frame.
pub type Pose = Isometry3<f64>;

/// Configuration vector: position followed by a scalar-first unit quaternion.
pub type Configuration = SVector<f64, 7>;

/// Default activity threshold for surface values (squared units for quadrics).
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-8;

const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("gradient is ill-defined at the singular locus of the surface")]
    IllDefinedGradient,
    #[error("point is not on the body boundary (max surface value {0:e})")]
    NotOnBoundary(f64),
    #[error("contact frame is not orthonormal and right-handed")]
    FrameNotOrthonormal,
    #[error("invalid surface: {0}")]
    InvalidSurface(&'static str),
    #[error("invalid body: {0}")]
    InvalidBody(&'static str),
    #[error("invalid inertial parameters: {0}")]
    InvalidInertia(&'static str),
}

/// Which side of a cylinder an end cap bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapSide {
    /// `a.x - b <= 0`
    Upper,
    /// `-(a.x - b) <= 0`
    Lower,
}

/// One smooth convex inequality in a body frame.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSurface {
    HalfSpace {
        normal: Vector3<f64>,
        offset: f64,
    },
    Cylinder {
        point: Point3<f64>,
        axis: Vector3<f64>,
        radius: f64,
    },
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
    Cap {
        axis: Vector3<f64>,
        bound: f64,
        side: CapSide,
    },
}

fn unit(v: Vector3<f64>) -> Result<Vector3<f64>, GeomError> {
    let n = v.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(GeomError::InvalidSurface(
            "direction must be a nonzero finite vector",
        ));
    }
    Ok(v / n)
}

impl ConvexSurface {
    pub fn half_space(normal: Vector3<f64>, offset: f64) -> Result<Self, GeomError> {
        Ok(Self::HalfSpace {
            normal: unit(normal)?,
            offset,
        })
    }

    pub fn cylinder(
        point: Point3<f64>,
        axis: Vector3<f64>,
        radius: f64,
    ) -> Result<Self, GeomError> {
        if !(radius > 0.0) {
            return Err(GeomError::InvalidSurface(
                "cylinder radius must be positive",
            ));
        }
        Ok(Self::Cylinder {
            point,
            axis: unit(axis)?,
            radius,
        })
    }

    pub fn sphere(center: Point3<f64>, radius: f64) -> Result<Self, GeomError> {
        if !(radius > 0.0) {
            return Err(GeomError::InvalidSurface("sphere radius must be positive"));
        }
        Ok(Self::Sphere { center, radius })
    }

    pub fn cap(axis: Vector3<f64>, bound: f64, side: CapSide) -> Result<Self, GeomError> {
        Ok(Self::Cap {
            axis: unit(axis)?,
            bound,
            side,
        })
    }

    /// Checks the unit-direction invariant.
    pub fn is_well_formed(&self) -> bool {
        match self {
            Self::HalfSpace { normal, .. } => (normal.norm() - 1.0).abs() <= UNIT_TOL,
            Self::Cylinder { axis, radius, .. } => {
                (axis.norm() - 1.0).abs() <= UNIT_TOL && *radius > 0.0
            }
            Self::Sphere { radius, .. } => *radius > 0.0,
            Self::Cap { axis, .. } => (axis.norm() - 1.0).abs() <= UNIT_TOL,
        }
    }

    /// Surface function at a point given in the surface's own frame.
    pub fn value_local(&self, x: &Point3<f64>) -> f64 {
        match self {
            Self::HalfSpace { normal, offset } => normal.dot(&x.coords) - offset,
            Self::Cylinder {
                point,
                axis,
                radius,
            } => {
                let d = x - point;
                let perp = d - axis * axis.dot(&d);
                perp.norm_squared() - radius * radius
            }
            Self::Sphere { center, radius } => (x - center).norm_squared() - radius * radius,
            Self::Cap { axis, bound, side } => {
                let s = axis.dot(&x.coords) - bound;
                match side {
                    CapSide::Upper => s,
                    CapSide::Lower => -s,
                }
            }
        }
    }

    /// Raw gradient in the surface frame; zero on a quadric's singular locus.
    pub fn gradient_local(&self, x: &Point3<f64>) -> Vector3<f64> {
        match self {
            Self::HalfSpace { normal, .. } => *normal,
            Self::Cylinder { point, axis, .. } => {
                let d = x - point;
                (d - axis * axis.dot(&d)) * 2.0
            }
            Self::Sphere { center, .. } => (x - center) * 2.0,
            Self::Cap { axis, side, .. } => match side {
                CapSide::Upper => *axis,
                CapSide::Lower => -axis,
            },
        }
    }

    /// Euclidean projection onto `{f <= 0}`, in the surface frame.
    pub fn project_local(&self, x: &Point3<f64>) -> Point3<f64> {
        match self {
            Self::HalfSpace { normal, offset } => {
                let s = normal.dot(&x.coords) - offset;
                if s > 0.0 {
                    x - normal * s
                } else {
                    *x
                }
            }
            Self::Cylinder {
                point,
                axis,
                radius,
            } => {
                let d = x - point;
                let along = axis * axis.dot(&d);
                let perp = d - along;
                let rho = perp.norm();
                if rho <= *radius {
                    *x
                } else {
                    point + along + perp * (radius / rho)
                }
            }
            Self::Sphere { center, radius } => {
                let d = x - center;
                let rho = d.norm();
                if rho <= *radius {
                    *x
                } else {
                    center + d * (radius / rho)
                }
            }
            Self::Cap { .. } => {
                let n = self.gradient_local(x);
                let s = self.value_local(x);
                if s > 0.0 {
                    x - n * s
                } else {
                    *x
                }
            }
        }
    }

    /// Euclidean signed distance to the surface's boundary (negative inside).
    pub fn signed_distance_local(&self, x: &Point3<f64>) -> f64 {
        match self {
            Self::HalfSpace { .. } | Self::Cap { .. } => self.value_local(x),
            Self::Cylinder {
                point,
                axis,
                radius,
            } => {
                let d = x - point;
                (d - axis * axis.dot(&d)).norm() - radius
            }
            Self::Sphere { center, radius } => (x - center).norm() - radius,
        }
    }
}

/// Returns `f(pose^-1 x)` for a surface whose frame sits at `pose`.
pub fn evaluate_surface(surface: &ConvexSurface, x: &Point3<f64>, pose: &Pose) -> f64 {
    surface.value_local(&pose.inverse_transform_point(x))
}

/// World-frame gradient of a surface whose frame sits at `pose`.
pub fn surface_gradient(
    surface: &ConvexSurface,
    x: &Point3<f64>,
    pose: &Pose,
) -> Result<Vector3<f64>, GeomError> {
    let g = surface.gradient_local(&pose.inverse_transform_point(x));
    if g.norm_squared() == 0.0 {
        return Err(GeomError::IllDefinedGradient);
    }
    Ok(pose.rotation * g)
}

/// Axis-aligned box in a body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn corners(&self) -> [Point3<f64>; 8] {
        let (a, b) = (self.min, self.max);
        [
            Point3::new(a.x, a.y, a.z),
            Point3::new(b.x, a.y, a.z),
            Point3::new(a.x, b.y, a.z),
            Point3::new(b.x, b.y, a.z),
            Point3::new(a.x, a.y, b.z),
            Point3::new(b.x, a.y, b.z),
            Point3::new(a.x, b.y, b.z),
            Point3::new(b.x, b.y, b.z),
        ]
    }

    /// Bounding box of this box after a rigid transform.
    pub fn transformed(&self, pose: &Pose) -> Aabb {
        let mut min = Point3::from(Vector3::repeat(f64::INFINITY));
        let mut max = Point3::from(Vector3::repeat(f64::NEG_INFINITY));
        for c in self.corners() {
            let w = pose * c;
            min = min.inf(&w);
            max = max.sup(&w);
        }
        Aabb { min, max }
    }

    pub fn circumradius(&self) -> f64 {
        (self.max - self.min).norm() * 0.5
    }

    /// Regular grid with `n` points per axis (n >= 2), row-major over x, y, z.
    pub fn grid(&self, n: usize) -> Vec<Point3<f64>> {
        let n = n.max(2);
        let step = (self.max - self.min) / (n - 1) as f64;
        let mut out = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.push(Point3::new(
                        self.min.x + step.x * i as f64,
                        self.min.y + step.y * j as f64,
                        self.min.z + step.z * k as f64,
                    ));
                }
            }
        }
        out
    }
}

/// A convex part of an object: an intersection of convex surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexBody {
    pub surfaces: Vec<ConvexSurface>,
    /// Transform from the owning object's frame to this body's frame.
    pub frame_offset: Pose,
    bounds: Option<Aabb>,
}

impl ConvexBody {
    /// `bounds` is the local bounding box; `None` marks an unbounded
    /// environment half-space, which must then be its only surface.
    pub fn new(
        surfaces: Vec<ConvexSurface>,
        frame_offset: Pose,
        bounds: Option<Aabb>,
    ) -> Result<Self, GeomError> {
        if surfaces.is_empty() {
            return Err(GeomError::InvalidBody("a body needs at least one surface"));
        }
        if surfaces.iter().any(|s| !s.is_well_formed()) {
            return Err(GeomError::InvalidBody(
                "surface directions must be unit vectors",
            ));
        }
        if bounds.is_none()
            && !(surfaces.len() == 1 && matches!(surfaces[0], ConvexSurface::HalfSpace { .. }))
        {
            return Err(GeomError::InvalidBody(
                "only a single half-space may be unbounded",
            ));
        }
        Ok(Self {
            surfaces,
            frame_offset,
            bounds,
        })
    }

    /// Environment half-space `{n.x <= d}`.
    pub fn half_space(normal: Vector3<f64>, offset: f64) -> Result<Self, GeomError> {
        Self::new(
            vec![ConvexSurface::half_space(normal, offset)?],
            Pose::identity(),
            None,
        )
    }

    /// Ball of radius `radius` centered at the body origin.
    pub fn sphere(radius: f64) -> Result<Self, GeomError> {
        let r = Vector3::repeat(radius);
        Self::new(
            vec![ConvexSurface::sphere(Point3::origin(), radius)?],
            Pose::identity(),
            Some(Aabb::new(Point3::from(-r), Point3::from(r))),
        )
    }

    /// Finite cylinder about the local z axis, between `bottom` and `top`.
    /// Surfaces are ordered (bottom cap, side, top cap).
    pub fn capped_cylinder(radius: f64, bottom: f64, top: f64) -> Result<Self, GeomError> {
        if !(top > bottom) {
            return Err(GeomError::InvalidBody("cylinder top must lie above bottom"));
        }
        let z = Vector3::z();
        Self::new(
            vec![
                ConvexSurface::cap(z, bottom, CapSide::Lower)?,
                ConvexSurface::cylinder(Point3::origin(), z, radius)?,
                ConvexSurface::cap(z, top, CapSide::Upper)?,
            ],
            Pose::identity(),
            Some(Aabb::new(
                Point3::new(-radius, -radius, bottom),
                Point3::new(radius, radius, top),
            )),
        )
    }

    /// Box with the given half extents, centered at the body origin.
    pub fn cuboid(half: Vector3<f64>) -> Result<Self, GeomError> {
        if half.iter().any(|h| !(*h > 0.0)) {
            return Err(GeomError::InvalidBody("box half extents must be positive"));
        }
        let mut surfaces = Vec::with_capacity(6);
        for axis in 0..3 {
            let mut n = Vector3::zeros();
            n[axis] = 1.0;
            surfaces.push(ConvexSurface::half_space(n, half[axis])?);
            surfaces.push(ConvexSurface::half_space(-n, half[axis])?);
        }
        Self::new(
            surfaces,
            Pose::identity(),
            Some(Aabb::new(Point3::from(-half), Point3::from(half))),
        )
    }

    pub fn with_offset(mut self, offset: Pose) -> Self {
        self.frame_offset = offset;
        self
    }

    pub fn is_environment(&self) -> bool {
        self.bounds.is_none()
    }

    pub fn local_bounds(&self) -> Option<&Aabb> {
        self.bounds.as_ref()
    }

    /// World pose of this body when its object sits at `object_pose`.
    pub fn world_pose(&self, object_pose: &Pose) -> Pose {
        object_pose * self.frame_offset
    }

    pub fn world_bounds(&self, object_pose: &Pose) -> Option<Aabb> {
        self.bounds
            .map(|b| b.transformed(&self.world_pose(object_pose)))
    }

    /// All surface values at a world point.
    pub fn values(&self, x: &Point3<f64>, object_pose: &Pose) -> Vec<f64> {
        let local = self.world_pose(object_pose).inverse_transform_point(x);
        self.surfaces
            .iter()
            .map(|s| s.value_local(&local))
            .collect()
    }

    pub fn max_value(&self, x: &Point3<f64>, object_pose: &Pose) -> f64 {
        self.values(x, object_pose)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Raw world-frame gradients of all surfaces at a world point.
    pub fn gradients(&self, x: &Point3<f64>, object_pose: &Pose) -> Vec<Vector3<f64>> {
        let pose = self.world_pose(object_pose);
        let local = pose.inverse_transform_point(x);
        self.surfaces
            .iter()
            .map(|s| pose.rotation * s.gradient_local(&local))
            .collect()
    }

    /// Largest Euclidean signed distance over the surfaces; its negation is
    /// the exact depth of an interior point below the body boundary.
    pub fn max_signed_distance(&self, x: &Point3<f64>, object_pose: &Pose) -> f64 {
        let local = self.world_pose(object_pose).inverse_transform_point(x);
        self.surfaces
            .iter()
            .map(|s| s.signed_distance_local(&local))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Indices of surfaces with `|f| <= tol` at `x`.
    pub fn active_surfaces(&self, x: &Point3<f64>, object_pose: &Pose, tol: f64) -> Vec<usize> {
        self.values(x, object_pose)
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() <= tol)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Residual of projecting `d` onto the cone generated by `generators`.
///
/// The optimum uses at most three linearly independent generators, so every
/// subset of size <= 3 is tried with a least-squares fit and the feasible
/// (nonnegative) fit with the smallest residual wins.
pub(crate) fn cone_residual(generators: &[Vector3<f64>], d: &Vector3<f64>) -> f64 {
    let k = generators.len();
    let mut best = d.norm();
    let mut subset = Vec::with_capacity(3);
    for mask in 1u32..(1u32 << k.min(16)) {
        if mask.count_ones() > 3 {
            continue;
        }
        subset.clear();
        subset.extend(
            (0..k)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| generators[i]),
        );
        let a = nalgebra::Matrix3xX::from_columns(&subset);
        let ata = a.transpose() * &a;
        let Some(chol) = ata.clone().cholesky() else {
            continue;
        };
        let coef = chol.solve(&(a.transpose() * d));
        if coef.iter().any(|c| *c < 0.0) {
            continue;
        }
        best = best.min((&a * coef - d).norm());
    }
    best
}

/// Whether `d` lies in the normal cone of `body` at the boundary point `x`.
pub fn normal_cone_contains(
    body: &ConvexBody,
    object_pose: &Pose,
    x: &Point3<f64>,
    d: &Vector3<f64>,
    tol: f64,
) -> Result<bool, GeomError> {
    let values = body.values(x, object_pose);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.abs() > tol {
        return Err(GeomError::NotOnBoundary(max));
    }
    let grads = body.gradients(x, object_pose);
    let active: Vec<_> = values
        .iter()
        .zip(grads)
        .filter(|(v, _)| v.abs() <= tol)
        .map(|(_, g)| g)
        .collect();
    Ok(cone_residual(&active, d) <= tol * d.norm())
}

/// The 7x6 matrix `G` with `q_dot = G(q) nu`, for spatial angular velocity.
pub fn kinematic_matrix(q: &Configuration) -> SMatrix<f64, 7, 6> {
    let (w, x, y, z) = (q[3], q[4], q[5], q[6]);
    let mut g = SMatrix::<f64, 7, 6>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    // q_dot = 1/2 (0, omega) * q
    let quat_rows = SMatrix::<f64, 4, 3>::new(
        -x, -y, -z, //
        w, z, -y, //
        -z, w, x, //
        y, -x, w,
    ) * 0.5;
    g.fixed_view_mut::<4, 3>(3, 3).copy_from(&quat_rows);
    g
}

/// Mass and body-frame inertia of a rigid object.
#[derive(Debug, Clone, PartialEq)]
pub struct InertialParams {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
}

impl InertialParams {
    pub fn new(mass: f64, inertia: Matrix3<f64>) -> Result<Self, GeomError> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(GeomError::InvalidInertia("mass must be positive"));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * inertia.abs().max().max(1.0) {
            return Err(GeomError::InvalidInertia("inertia must be symmetric"));
        }
        if inertia.cholesky().is_none() {
            return Err(GeomError::InvalidInertia(
                "inertia must be positive definite",
            ));
        }
        Ok(Self { mass, inertia })
    }
}

/// Spatial inertia `R I R^T`.
pub fn world_inertia(params: &InertialParams, orientation: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let r = orientation.to_rotation_matrix();
    r.matrix() * params.inertia * r.matrix().transpose()
}

/// Position, orientation and generalized velocity of a free rigid body.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidState {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub linear_velocity: Vector3<f64>,
    /// Angular velocity expressed in the world frame.
    pub angular_velocity: Vector3<f64>,
}

impl RigidState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn pose(&self) -> Pose {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn configuration(&self) -> Configuration {
        let q = self.orientation.quaternion();
        Configuration::from_column_slice(&[
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ])
    }

    pub fn velocity(&self) -> Vector6<f64> {
        let mut nu = Vector6::zeros();
        nu.fixed_rows_mut::<3>(0).copy_from(&self.linear_velocity);
        nu.fixed_rows_mut::<3>(3).copy_from(&self.angular_velocity);
        nu
    }
}

/// End-of-step configuration `q + h G(q) nu`, before renormalization.
pub fn advance_configuration(q: &Configuration, nu: &Vector6<f64>, h: f64) -> Configuration {
    q + kinematic_matrix(q) * nu * h
}

/// Splits a configuration into position and normalized orientation.
pub fn configuration_pose(q: &Configuration) -> (Vector3<f64>, UnitQuaternion<f64>) {
    let position = Vector3::new(q[0], q[1], q[2]);
    let quat = Quaternion::new(q[3], q[4], q[5], q[6]);
    (position, UnitQuaternion::from_quaternion(quat))
}

/// Contact frame `(t, o, n)`, right-handed with `t x o = n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactFrame {
    pub t: Vector3<f64>,
    pub o: Vector3<f64>,
    pub n: Vector3<f64>,
}

impl ContactFrame {
    /// Completes a unit normal to a frame. For `n = z` this gives `t = x`, `o = y`.
    pub fn from_normal(n: Vector3<f64>) -> Self {
        let n = n.normalize();
        let seed = if n.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let t = (seed - n * n.dot(&seed)).normalize();
        let o = n.cross(&t);
        Self { t, o, n }
    }
}

/// Contact wrenches of one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactWrenches {
    pub normal: Vector6<f64>,
    pub tangent: Vector6<f64>,
    pub other: Vector6<f64>,
    pub torsion: Vector6<f64>,
}

fn wrench(force: &Vector3<f64>, moment: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(force.x, force.y, force.z, moment.x, moment.y, moment.z)
}

fn wrenches_unchecked(
    n: &Vector3<f64>,
    t: &Vector3<f64>,
    o: &Vector3<f64>,
    r: &Vector3<f64>,
) -> ContactWrenches {
    ContactWrenches {
        normal: wrench(n, &r.cross(n)),
        tangent: wrench(t, &r.cross(t)),
        other: wrench(o, &r.cross(o)),
        torsion: wrench(&Vector3::zeros(), n),
    }
}

/// Wrenches about the center of mass of unit impulses along the contact
/// frame axes applied at lever arm `r`, plus the torsional wrench about `n`.
pub fn contact_wrenches(
    n: &Vector3<f64>,
    t: &Vector3<f64>,
    o: &Vector3<f64>,
    r: &Vector3<f64>,
) -> Result<ContactWrenches, GeomError> {
    const TOL: f64 = 1e-9;
    let ok = (n.norm() - 1.0).abs() <= TOL
        && (t.norm() - 1.0).abs() <= TOL
        && (o.norm() - 1.0).abs() <= TOL
        && n.dot(t).abs() <= TOL
        && n.dot(o).abs() <= TOL
        && t.dot(o).abs() <= TOL
        && (t.cross(o) - n).norm() <= TOL;
    if !ok {
        return Err(GeomError::FrameNotOrthonormal);
    }
    Ok(wrenches_unchecked(n, t, o, r))
}

impl ContactFrame {
    pub fn wrenches(&self, r: &Vector3<f64>) -> ContactWrenches {
        wrenches_unchecked(&self.n, &self.t, &self.o, r)
    }
}
