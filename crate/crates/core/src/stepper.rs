//! Geometrically implicit time stepping.
//!
//! Each step assembles one mixed complementarity problem coupling the
//! discretized Newton-Euler equations, the kinematic map, the elliptic
//! friction law and the closest-point (equivalent contact point) conditions
//! of every object/environment patch, all evaluated at the end-of-step
//! configuration, and hands it to [`crate::mncp::solve`].
//!
//! Unknown layout: `[nu (6) | per patch: p_n, p_t, p_o, p_r, sigma, a1 (3),
//! a2 (3), l_A (one per object surface), l_B (one per environment surface)]`.
//! In `l_A` the slot of the designated surface `k1` holds the overall cone
//! scale; the coefficient of `grad f_k1` inside the cone is fixed to one.

use nalgebra::{Matrix6, Point3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{
    advance_configuration, configuration_pose, world_inertia, Configuration, ContactFrame,
    ConvexBody, ConvexSurface, InertialParams, Pose, RigidState,
};
use crate::mncp::{self, MncpProblem, MncpSolution, SolveStatus, SolverConfig, VariableLayout};
use crate::oracle::{self, OracleError};

/// Gap or normal impulse below which a patch counts as touching.
pub const MODE_TOL: f64 = 1e-7;
/// Oracle distance below which a patch starts out touching in a fresh guess.
pub const TOUCH_TOL: f64 = 1e-6;
/// Oracle accuracy used for initial guesses.
const GUESS_ORACLE_TOL: f64 = 1e-10;
/// Surfaces within this of the largest value count as active.
const ACTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("step size must be positive, got {0}")]
    InvalidStepSize(f64),
    #[error("unknown vector has {got} entries, layout needs {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("environment body of patch {0} is not a single half-space")]
    NonPlanarEnvironment(usize),
    #[error("solver failed ({status:?}, residual {residual:e} after {iterations} iterations)")]
    SolverFailed {
        status: SolveStatus,
        residual: f64,
        iterations: usize,
    },
    #[error("invalid friction parameters: {0}")]
    InvalidFriction(&'static str),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Elliptic friction constants of one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionParams {
    pub e_t: f64,
    pub e_o: f64,
    /// Torsional scale, meters.
    pub e_r: f64,
    pub mu: f64,
}

impl FrictionParams {
    pub fn new(e_t: f64, e_o: f64, e_r: f64, mu: f64) -> Result<Self, StepError> {
        if !(e_t > 0.0 && e_o > 0.0 && e_r > 0.0) {
            return Err(StepError::InvalidFriction(
                "ellipsoid constants must be positive",
            ));
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(StepError::InvalidFriction(
                "friction coefficient must be nonnegative",
            ));
        }
        Ok(Self { e_t, e_o, e_r, mu })
    }

    /// Unit ellipsoid with coefficient `mu`.
    pub fn isotropic(mu: f64) -> Self {
        Self {
            e_t: 1.0,
            e_o: 1.0,
            e_r: 1.0,
            mu,
        }
    }

    /// `mu^2 p_n^2 - (p_t/e_t)^2 - (p_o/e_o)^2 - (p_r/e_r)^2`
    pub fn ellipsoid_slack(&self, p_n: f64, p_t: f64, p_o: f64, p_r: f64) -> f64 {
        self.mu * self.mu * p_n * p_n
            - (p_t / self.e_t).powi(2)
            - (p_o / self.e_o).powi(2)
            - (p_r / self.e_r).powi(2)
    }

    /// `mu p_n - |(p_t/e_t, p_o/e_o, p_r/e_r)|`. Same sign and zero set as
    /// [`Self::ellipsoid_slack`] for `p_n >= 0`, but first order in the
    /// friction impulses, so a separated patch pins them to zero.
    pub fn cone_slack(&self, p_n: f64, p_t: f64, p_o: f64, p_r: f64) -> f64 {
        self.mu * p_n - Vector3::new(p_t / self.e_t, p_o / self.e_o, p_r / self.e_r).norm()
    }
}

/// A potential contact between one convex part of the moving object and a
/// fixed environment half-space.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub object: ConvexBody,
    pub environment: ConvexBody,
    pub friction: FrictionParams,
}

/// Everything about the moving object and its environment that stays fixed
/// over a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSystem {
    pub inertia: InertialParams,
    /// Gravitational acceleration along `-z`.
    pub gravity: f64,
    pub patches: Vec<Patch>,
    frames: Vec<ContactFrame>,
}

impl ContactSystem {
    pub fn new(
        inertia: InertialParams,
        gravity: f64,
        patches: Vec<Patch>,
    ) -> Result<Self, StepError> {
        let frames = patches
            .iter()
            .enumerate()
            .map(|(i, p)| match p.environment.surfaces.as_slice() {
                [ConvexSurface::HalfSpace { normal, .. }] => Ok(ContactFrame::from_normal(
                    p.environment.frame_offset.rotation * normal,
                )),
                _ => Err(StepError::NonPlanarEnvironment(i)),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            inertia,
            gravity,
            patches,
            frames,
        })
    }

    pub fn frame(&self, patch: usize) -> &ContactFrame {
        &self.frames[patch]
    }

    fn layout(&self) -> Vec<PatchSlots> {
        let mut base = 6;
        self.patches
            .iter()
            .map(|p| {
                let slots = PatchSlots {
                    base,
                    m: p.object.surfaces.len(),
                    nb: p.environment.surfaces.len(),
                };
                base += slots.len();
                slots
            })
            .collect()
    }

    /// Length of the unknown vector.
    pub fn unknowns(&self) -> usize {
        self.layout().last().map_or(6, |s| s.base + s.len())
    }

    /// Named slices of the unknown vector.
    pub fn variable_layout(&self) -> VariableLayout {
        let mut layout = VariableLayout::default();
        layout.push("nu", 6);
        for (i, s) in self.layout().iter().enumerate() {
            layout.push(format!("patch{i}.impulses"), 5);
            layout.push(format!("patch{i}.a1"), 3);
            layout.push(format!("patch{i}.a2"), 3);
            layout.push(format!("patch{i}.l_object"), s.m);
            layout.push(format!("patch{i}.l_environment"), s.nb);
        }
        layout
    }
}

#[derive(Debug, Clone, Copy)]
struct PatchSlots {
    base: usize,
    m: usize,
    nb: usize,
}

impl PatchSlots {
    fn len(&self) -> usize {
        11 + self.m + self.nb
    }
    fn p_n(&self) -> usize {
        self.base
    }
    fn sigma(&self) -> usize {
        self.base + 4
    }
    fn a1(&self) -> usize {
        self.base + 5
    }
    fn a2(&self) -> usize {
        self.base + 8
    }
    fn l_a(&self) -> usize {
        self.base + 11
    }
    fn l_b(&self) -> usize {
        self.base + 11 + self.m
    }
}

fn point_at(x: &[f64], i: usize) -> Point3<f64> {
    Point3::new(x[i], x[i + 1], x[i + 2])
}

/// Applied impulse over one step, excluding gravity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AppliedWrench {
    /// N s
    pub linear: Vector3<f64>,
    /// N m s
    pub angular: Vector3<f64>,
}

impl AppliedWrench {
    pub fn impulse(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }
}

/// One entry of a piecewise-constant wrench schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum WrenchEntry {
    /// Force and moment held over `[t_start, t_end)`.
    Interval {
        t_start: f64,
        t_end: f64,
        force: Vector3<f64>,
        moment: Vector3<f64>,
    },
    /// Impulse delivered entirely within the step nearest `time`.
    Impulse {
        time: f64,
        linear: Vector3<f64>,
        angular: Vector3<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WrenchSchedule {
    pub entries: Vec<WrenchEntry>,
}

impl WrenchSchedule {
    /// Applied impulse (gravity excluded) for step `index` of size `h`.
    pub fn applied(&self, index: usize, h: f64) -> AppliedWrench {
        let t = index as f64 * h;
        let eps = 1e-9 * h;
        let mut total = AppliedWrench::default();
        for entry in &self.entries {
            match entry {
                WrenchEntry::Interval {
                    t_start,
                    t_end,
                    force,
                    moment,
                } => {
                    if t >= t_start - eps && t < t_end - eps {
                        total.linear += force * h;
                        total.angular += moment * h;
                    }
                }
                WrenchEntry::Impulse {
                    time,
                    linear,
                    angular,
                } => {
                    if (time / h).round() as i64 == index as i64 {
                        total.linear += linear;
                        total.angular += angular;
                    }
                }
            }
        }
        total
    }
}

/// Gyroscopic impulse `(0, -h w x (R I R^T) w)` at the start of the step.
pub fn coriolis_impulse(
    params: &InertialParams,
    orientation: &nalgebra::UnitQuaternion<f64>,
    omega: &Vector3<f64>,
    h: f64,
) -> Vector6<f64> {
    let inertia = world_inertia(params, orientation);
    let torque = -omega.cross(&(inertia * omega)) * h;
    Vector6::new(0.0, 0.0, 0.0, torque.x, torque.y, torque.z)
}

/// Unknowns of one patch at a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPatchVars {
    /// Equivalent contact point on the object body.
    pub a1: Point3<f64>,
    /// Equivalent contact point on the environment body.
    pub a2: Point3<f64>,
    pub p_n: f64,
    pub p_t: f64,
    pub p_o: f64,
    pub p_r: f64,
    pub sigma: f64,
    /// Object multipliers (slot `k1` is the cone scale) then environment ones.
    pub l: Vec<f64>,
    pub k1: usize,
}

impl ContactPatchVars {
    pub fn gap(&self) -> f64 {
        (self.a1 - self.a2).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactMode {
    Separated,
    Touching,
}

impl ContactMode {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Separated => "separated",
            Self::Touching => "touching",
        }
    }
}

/// Starting point for a step's solve, together with the `k1` designation
/// of every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub k1: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub status: SolveStatus,
    pub residual: f64,
    pub iterations: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: RigidState,
    pub patches: Vec<ContactPatchVars>,
    pub modes: Vec<ContactMode>,
    pub diagnostics: SolveDiagnostics,
    /// Quaternion norm before renormalization.
    pub raw_quaternion_norm: f64,
    /// The solved unknown vector, reusable as the next warm start.
    pub solution: WarmStart,
}

struct StepContext<'s> {
    system: &'s ContactSystem,
    slots: Vec<PatchSlots>,
    k1: Vec<usize>,
    q_u: Configuration,
    nu_u: Vector6<f64>,
    mass_matrix: Matrix6<f64>,
    /// Applied impulse with gravity, plus the gyroscopic impulse.
    external: Vector6<f64>,
    h: f64,
}

impl<'s> StepContext<'s> {
    fn new(
        state: &RigidState,
        system: &'s ContactSystem,
        wrench: &AppliedWrench,
        h: f64,
        k1: Vec<usize>,
    ) -> Self {
        let m = system.inertia.mass;
        let mut mass_matrix = Matrix6::zeros();
        mass_matrix
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(nalgebra::Matrix3::identity() * m));
        mass_matrix
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&world_inertia(&system.inertia, &state.orientation));
        let mut external = wrench.impulse();
        external[2] -= m * system.gravity * h;
        external += coriolis_impulse(
            &system.inertia,
            &state.orientation,
            &state.angular_velocity,
            h,
        );
        Self {
            system,
            slots: system.layout(),
            k1,
            q_u: state.configuration(),
            nu_u: state.velocity(),
            mass_matrix,
            external,
            h,
        }
    }

    fn n_eq(&self) -> usize {
        6 + 10 * self.slots.len()
    }

    fn pair_variables(&self) -> Vec<usize> {
        let mut z = Vec::new();
        for s in &self.slots {
            z.push(s.sigma());
        }
        for (s, k1) in self.slots.iter().zip(&self.k1) {
            z.extend((s.l_a()..s.l_a() + s.m).filter(|v| *v != s.l_a() + k1));
            z.extend(s.l_b()..s.l_b() + s.nb);
        }
        for s in &self.slots {
            z.push(s.p_n());
        }
        z
    }

    fn end_pose(&self, nu: &Vector6<f64>) -> (Vector3<f64>, Pose) {
        let q1 = advance_configuration(&self.q_u, nu, self.h);
        let (position, rotation) = configuration_pose(&q1);
        (
            position,
            Pose::from_parts(nalgebra::Translation3::from(position), rotation),
        )
    }

    fn residual(&self, x: &[f64], eq: &mut [f64], w: &mut [f64]) {
        let nu = Vector6::from_column_slice(&x[0..6]);
        let (com, pose) = self.end_pose(&nu);
        let identity = Pose::identity();

        let mut newton_euler = self.mass_matrix * (nu - self.nu_u) - self.external;
        let np = self.slots.len();
        let mut w_member = np;
        for (i, s) in self.slots.iter().enumerate() {
            let patch = &self.system.patches[i];
            let fr = &patch.friction;
            let frame = self.system.frame(i);
            let b = s.base;
            let (p_n, p_t, p_o, p_r, sigma) = (x[b], x[b + 1], x[b + 2], x[b + 3], x[b + 4]);
            let a1 = point_at(x, s.a1());
            let a2 = point_at(x, s.a2());

            let wr = frame.wrenches(&(a2 - Point3::from(com)));
            newton_euler -= wr.normal * p_n + wr.tangent * p_t + wr.other * p_o + wr.torsion * p_r;

            let row = 6 + 3 * i;
            let scale = fr.mu * p_n;
            eq[row] = fr.e_t * fr.e_t * scale * wr.tangent.dot(&nu) + p_t * sigma;
            eq[row + 1] = fr.e_o * fr.e_o * scale * wr.other.dot(&nu) + p_o * sigma;
            eq[row + 2] = fr.e_r * fr.e_r * scale * wr.torsion.dot(&nu) + p_r * sigma;

            w[i] = fr.cone_slack(p_n, p_t, p_o, p_r);

            let l_a = &x[s.l_a()..s.l_a() + s.m];
            let l_b = &x[s.l_b()..s.l_b() + s.nb];
            let kkt_row = 6 + 3 * np + KKT_ROWS * i;
            let (wa, rest) = w[w_member..].split_at_mut(s.m - 1);
            kkt_rows(
                &patch.object,
                &pose,
                &patch.environment,
                &identity,
                self.k1[i],
                &a1,
                &a2,
                l_a,
                l_b,
                &mut eq[kkt_row..kkt_row + KKT_ROWS],
                wa,
                &mut rest[..s.nb],
            );
            // Position-level rows, measured as velocities like the rest.
            for r in [0, 1, 2, 6] {
                eq[kkt_row + r] /= self.h;
            }
            for v in w[w_member..w_member + s.m - 1 + s.nb].iter_mut() {
                *v /= self.h;
            }
            w_member += s.m - 1 + s.nb;

            w[w_member_end(np, &self.slots) + i] = gap_function(patch, &a1) / self.h;
        }
        eq[0..6].copy_from_slice(newton_euler.as_slice());
    }
}

fn w_member_end(np: usize, slots: &[PatchSlots]) -> usize {
    np + slots.iter().map(|s| s.m - 1 + s.nb).sum::<usize>()
}

/// Non-penetration side of a patch: the environment surfaces at `a1`. For a
/// half-space this is linear in `a1`, and it is negative exactly at the
/// roots with a negative cone scale, where `a1` is buried in the ground.
/// The object surfaces at `a2` would do as well at separated roots but kink
/// at rims and corners, where touching contacts sit.
fn gap_function(patch: &Patch, a1: &Point3<f64>) -> f64 {
    patch.environment.max_value(a1, &Pose::identity())
}

/// Equality rows per patch from the closest-point conditions.
const KKT_ROWS: usize = 7;

/// Modified KKT conditions of the closest-point problem between body A at
/// `pose_a` and body B at `pose_b`. Equality rows: the separation and cone
/// balance (three each) and `f_k1(a1) = 0`, since `k1` must be active at
/// `a1`. The `k1` slot of `l_a` holds the cone scale and has no membership
/// pair; `w_a` receives `-f(a1)` for the other object surfaces and `w_b`
/// receives `-g(a2)`.
#[allow(clippy::too_many_arguments)]
fn kkt_rows(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    k1: usize,
    a1: &Point3<f64>,
    a2: &Point3<f64>,
    l_a: &[f64],
    l_b: &[f64],
    eq: &mut [f64],
    w_a: &mut [f64],
    w_b: &mut [f64],
) {
    let world_a = a.world_pose(pose_a);
    let local_a = world_a.inverse_transform_point(a1);
    let mut cone = Vector3::zeros();
    let mut slot = 0;
    for (c, surface) in a.surfaces.iter().enumerate() {
        let value = surface.value_local(&local_a);
        if c == k1 {
            cone += surface.gradient_local(&local_a);
            eq[6] = value;
        } else {
            cone += surface.gradient_local(&local_a) * l_a[c];
            w_a[slot] = -value;
            slot += 1;
        }
    }
    let cone = world_a.rotation * cone;

    let world_b = b.world_pose(pose_b);
    let local_b = world_b.inverse_transform_point(a2);
    let mut cone_b = Vector3::zeros();
    for (j, surface) in b.surfaces.iter().enumerate() {
        cone_b += surface.gradient_local(&local_b) * l_b[j];
        w_b[j] = -surface.value_local(&local_b);
    }
    let cone_b = world_b.rotation * cone_b;

    let separation = (a1 - a2) + cone * l_a[k1];
    let balance = cone + cone_b;
    eq[0..3].copy_from_slice(separation.as_slice());
    eq[3..6].copy_from_slice(balance.as_slice());
}

/// Designated surface: among the object surfaces active at `a1`, the one
/// whose outward normal points furthest into the environment.
fn designate_k1(body: &ConvexBody, pose: &Pose, a1: &Point3<f64>, n: &Vector3<f64>) -> usize {
    let values = body.values(a1, pose);
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gradients = body.gradients(a1, pose);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (v, g)) in values.iter().zip(&gradients).enumerate() {
        if *v < top - ACTIVE_TOL {
            continue;
        }
        let norm = g.norm();
        let alignment = if norm > 0.0 { -g.dot(n) / norm } else { -1.0 };
        if alignment > best.1 {
            best = (i, alignment);
        }
    }
    best.0
}

/// Builds the step's complementarity problem for inspection or testing.
pub fn assemble_step_residual<'s>(
    state: &RigidState,
    system: &'s ContactSystem,
    wrench: &AppliedWrench,
    h: f64,
    k1: &[usize],
) -> Result<MncpProblem<'s>, StepError> {
    if !(h > 0.0) {
        return Err(StepError::InvalidStepSize(h));
    }
    if k1.len() != system.patches.len() {
        return Err(StepError::LayoutMismatch {
            expected: system.patches.len(),
            got: k1.len(),
        });
    }
    let ctx = StepContext::new(state, system, wrench, h, k1.to_vec());
    let n = system.unknowns();
    let n_eq = ctx.n_eq();
    let z = ctx.pair_variables();
    Ok(
        MncpProblem::new(n, n_eq, z, system.variable_layout(), move |x, eq, w| {
            ctx.residual(x, eq, w)
        })
        .expect("layout is square by construction"),
    )
}

fn slip_speed(
    frame: &ContactFrame,
    friction: &FrictionParams,
    state: &RigidState,
    point: &Point3<f64>,
) -> f64 {
    let r = point - Point3::from(state.position);
    let v = state.linear_velocity + state.angular_velocity.cross(&r);
    let wn = state.angular_velocity.dot(&frame.n);
    ((friction.e_t * frame.t.dot(&v)).powi(2)
        + (friction.e_o * frame.o.dot(&v)).powi(2)
        + (friction.e_r * wn).powi(2))
    .sqrt()
}

/// Warm start built from the current state: oracle closest points, the
/// gravity impulse shared among touching patches and the current slip speed.
/// With `seed`, touching patches get their contact points drawn uniformly
/// from a disk covering the patch instead.
pub fn initial_guess(
    state: &RigidState,
    system: &ContactSystem,
    h: f64,
    seed: Option<u64>,
) -> Result<WarmStart, StepError> {
    let pose = state.pose();
    let identity = Pose::identity();
    let slots = system.layout();
    let mut x = vec![0.0; system.unknowns()];
    x[0..6].copy_from_slice(state.velocity().as_slice());
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);

    let mut closest = Vec::with_capacity(system.patches.len());
    for patch in &system.patches {
        closest.push(oracle::closest_points_bruteforce(
            &patch.object,
            &pose,
            &patch.environment,
            &identity,
            GUESS_ORACLE_TOL,
        )?);
    }
    let touching = closest.iter().filter(|c| c.distance <= TOUCH_TOL).count();
    let gravity_share = if touching > 0 {
        system.inertia.mass * system.gravity * h / touching as f64
    } else {
        0.0
    };

    let mut k1s = Vec::with_capacity(slots.len());
    for (i, (s, c)) in slots.iter().zip(&closest).enumerate() {
        let patch = &system.patches[i];
        let frame = system.frame(i);
        let is_touching = c.distance <= TOUCH_TOL;
        let (mut a1, mut a2) = (c.a1, c.a2);
        if let (Some(rng), true) = (rng.as_mut(), is_touching) {
            if let Some(bounds) = patch.object.world_bounds(&pose) {
                let extent = bounds.max - bounds.min;
                let radius = 0.5 * (frame.t.dot(&extent).abs()).min(frame.o.dot(&extent).abs());
                let center = bounds.center();
                let rho = radius * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let candidate = center + frame.t * (rho * phi.cos()) + frame.o * (rho * phi.sin())
                    - frame.n * frame.n.dot(&(center - a2));
                a1 = oracle::project_onto_body(&patch.object, &pose, &candidate);
                a2 = oracle::project_onto_body(&patch.environment, &identity, &a1);
            }
        }
        let p_n = if is_touching { gravity_share } else { 0.0 };
        k1s.push(fill_patch_guess(
            &mut x, s, patch, frame, state, &pose, &a1, &a2, p_n,
        ));
    }
    Ok(WarmStart { x, k1: k1s })
}

/// Writes the guess for one patch given its contact points and returns the
/// designated surface.
#[allow(clippy::too_many_arguments)]
fn fill_patch_guess(
    x: &mut [f64],
    s: &PatchSlots,
    patch: &Patch,
    frame: &ContactFrame,
    state: &RigidState,
    pose: &Pose,
    a1: &Point3<f64>,
    a2: &Point3<f64>,
    p_n: f64,
) -> usize {
    let identity = Pose::identity();
    let k1 = designate_k1(&patch.object, pose, a1, &frame.n);
    x[s.p_n()..s.sigma()].fill(0.0);
    x[s.p_n()] = p_n;
    x[s.sigma()] = slip_speed(frame, &patch.friction, state, a2);
    x[s.a1()..s.a1() + 3].copy_from_slice(a1.coords.as_slice());
    x[s.a2()..s.a2() + 3].copy_from_slice(a2.coords.as_slice());

    let values_a = patch.object.values(a1, pose);
    for (c, v) in values_a.iter().enumerate() {
        x[s.l_a() + c] = if v.abs() <= TOUCH_TOL { 1.0 } else { 0.0 };
    }
    let grad_k1 = patch.object.gradients(a1, pose)[k1].norm();
    x[s.l_a() + k1] = if grad_k1 > 0.0 {
        (a1 - a2).norm() / grad_k1
    } else {
        0.0
    };
    let values_b = patch.environment.values(a2, &identity);
    let grads_b = patch.environment.gradients(a2, &identity);
    for (j, v) in values_b.iter().enumerate() {
        x[s.l_b() + j] = if v.abs() <= TOUCH_TOL {
            grad_k1 / grads_b[j].norm().max(1e-300)
        } else {
            0.0
        };
    }
    k1
}

/// Point of `body` furthest along `-n`, approximated by projecting a distant
/// point onto the body.
fn support_point(body: &ConvexBody, pose: &Pose, n: &Vector3<f64>) -> Option<Point3<f64>> {
    let bounds = body.world_bounds(pose)?;
    let far = bounds.center() - n * (10.0 * bounds.circumradius().max(1e-3));
    Some(oracle::project_onto_body(body, pose, &far))
}

/// Guess built from a free-flight prediction of the end-of-step pose: every
/// patch gets the object's support point toward its environment plane and
/// its projection onto the plane. Used when the warm start fails, typically
/// across an impulse that changes which part of a patch carries the load.
fn predictor_guess(ctx: &StepContext<'_>, state: &RigidState) -> WarmStart {
    let system = ctx.system;
    let mut impulse = ctx.external;
    impulse[2] += system.inertia.mass * system.gravity * ctx.h;
    let nu = ctx.nu_u
        + ctx
            .mass_matrix
            .cholesky()
            .map_or(Vector6::zeros(), |c| c.solve(&impulse));
    let (_, pose) = ctx.end_pose(&nu);
    let identity = Pose::identity();

    let mut points = Vec::with_capacity(ctx.slots.len());
    for (i, patch) in system.patches.iter().enumerate() {
        let n = system.frame(i).n;
        let a1 =
            support_point(&patch.object, &pose, &n).unwrap_or_else(|| Point3::from(state.position));
        let a2 = oracle::project_onto_body(&patch.environment, &identity, &a1);
        let touching = patch.environment.max_value(&a1, &identity) <= TOUCH_TOL;
        points.push((a1, a2, touching));
    }
    let touching = points.iter().filter(|p| p.2).count();
    let share = if touching > 0 {
        system.inertia.mass * system.gravity * ctx.h / touching as f64
    } else {
        0.0
    };
    let mut x = vec![0.0; system.unknowns()];
    x[0..6].copy_from_slice(nu.as_slice());
    let mut k1 = Vec::with_capacity(points.len());
    for (i, (s, (a1, a2, t))) in ctx.slots.iter().zip(&points).enumerate() {
        let p_n = if *t { share } else { 0.0 };
        k1.push(fill_patch_guess(
            &mut x,
            s,
            &system.patches[i],
            system.frame(i),
            state,
            &pose,
            a1,
            a2,
            p_n,
        ));
    }
    WarmStart { x, k1 }
}

/// Moves each patch's `k1` to the object surface carrying most of the normal
/// cone at the warm start, once it outweighs the current one twice over, and
/// rescales the multipliers to match. Keeps them bounded when the contact
/// normal drifts toward another surface, as when a rim contact rolls onto
/// the side of a cylinder.
fn rebalance_k1(system: &ContactSystem, pose: &Pose, warm: &WarmStart) -> WarmStart {
    let mut out = warm.clone();
    for (i, s) in system.layout().iter().enumerate() {
        let object = &system.patches[i].object;
        let k1 = warm.k1[i];
        let a1 = point_at(&warm.x, s.a1());
        let grads = object.gradients(&a1, pose);
        let l_a = &warm.x[s.l_a()..s.l_a() + s.m];
        let weight = |c: usize| {
            let lambda = if c == k1 { 1.0 } else { l_a[c] };
            lambda * grads[c].norm()
        };
        let Some(best) = (0..s.m).max_by(|a, b| weight(*a).total_cmp(&weight(*b))) else {
            continue;
        };
        if best == k1 || !(weight(best) > 2.0 * weight(k1)) {
            continue;
        }
        let lambda = l_a[best];
        let scale = l_a[k1];
        let x = &mut out.x;
        for c in 0..s.m {
            x[s.l_a() + c] = if c == best {
                scale * lambda
            } else if c == k1 {
                1.0 / lambda
            } else {
                l_a[c] / lambda
            };
        }
        for j in 0..s.nb {
            x[s.l_b() + j] /= lambda;
        }
        out.k1[i] = best;
    }
    out
}

/// Advances the state by one step of size `h`.
pub fn step(
    state: &RigidState,
    system: &ContactSystem,
    wrench: &AppliedWrench,
    h: f64,
    config: &SolverConfig,
    warm: &WarmStart,
) -> Result<StepResult, StepError> {
    if !(h > 0.0) {
        return Err(StepError::InvalidStepSize(h));
    }
    let n = system.unknowns();
    if warm.x.len() != n {
        return Err(StepError::LayoutMismatch {
            expected: n,
            got: warm.x.len(),
        });
    }
    if warm.k1.len() != system.patches.len() {
        return Err(StepError::LayoutMismatch {
            expected: system.patches.len(),
            got: warm.k1.len(),
        });
    }
    let slots = system.layout();

    // Warm start first; if that stalls, a predicted-pose guess, then the
    // same guess with the configured restarts, then a fresh guess at the
    // current pose, then the same with the body at rest, which is where
    // spinning bodies that land flat tend to end up.
    let quick = SolverConfig {
        max_restarts: 0,
        ..config.clone()
    };
    let patient = SolverConfig {
        max_restarts: 3 * config.max_restarts,
        ..config.clone()
    };
    let predictor_ctx = StepContext::new(state, system, wrench, h, warm.k1.clone());
    let mut total_iterations = 0;
    let mut failure: Option<MncpSolution> = None;
    let mut solved = None;
    for attempt in 0..5 {
        let (guess, cfg) = match attempt {
            0 => (rebalance_k1(system, &state.pose(), warm), &quick),
            1 => (predictor_guess(&predictor_ctx, state), &quick),
            2 => (predictor_guess(&predictor_ctx, state), config),
            3 => (initial_guess(state, system, h, None)?, &patient),
            _ => {
                let mut g = initial_guess(state, system, h, None)?;
                g.x[0..6].fill(0.0);
                (g, &patient)
            }
        };
        let problem = assemble_step_residual(state, system, wrench, h, &guess.k1)?;
        let sol = mncp::solve(&problem, &guess.x, cfg);
        total_iterations += sol.iterations;
        if sol.converged() {
            solved = Some((sol, guess.k1));
            break;
        }
        if failure
            .as_ref()
            .is_none_or(|f| sol.residual_norm < f.residual_norm)
        {
            failure = Some(sol);
        }
    }
    let Some((sol, k1)) = solved else {
        let f = failure.expect("at least one attempt");
        return Err(StepError::SolverFailed {
            status: f.status,
            residual: f.residual_norm,
            iterations: total_iterations,
        });
    };
    let x = sol.x;
    let nu = Vector6::from_column_slice(&x[0..6]);
    let q1 = advance_configuration(&state.configuration(), &nu, h);
    let raw_norm = q1.fixed_rows::<4>(3).norm();
    let (position, orientation) = configuration_pose(&q1);
    let new_state = RigidState {
        position,
        orientation,
        linear_velocity: nu.fixed_rows::<3>(0).into(),
        angular_velocity: nu.fixed_rows::<3>(3).into(),
    };

    let mut patches = Vec::with_capacity(slots.len());
    let mut modes = Vec::with_capacity(slots.len());
    for (i, s) in slots.iter().enumerate() {
        let b = s.base;
        let vars = ContactPatchVars {
            a1: point_at(&x, s.a1()),
            a2: point_at(&x, s.a2()),
            p_n: x[b],
            p_t: x[b + 1],
            p_o: x[b + 2],
            p_r: x[b + 3],
            sigma: x[b + 4],
            l: x[s.l_a()..s.l_b() + s.nb].to_vec(),
            k1: k1[i],
        };
        modes.push(if vars.p_n > MODE_TOL || vars.gap() < MODE_TOL {
            ContactMode::Touching
        } else {
            ContactMode::Separated
        });
        patches.push(vars);
    }
    Ok(StepResult {
        state: new_state,
        patches,
        modes,
        diagnostics: SolveDiagnostics {
            status: sol.status,
            residual: sol.residual_norm,
            iterations: total_iterations,
            restarts: sol.restarts_used,
        },
        raw_quaternion_norm: raw_norm,
        solution: WarmStart { x, k1 },
    })
}

/// A simulation that stopped early; `trajectory` holds the completed steps.
#[derive(Debug, Clone, Error)]
#[error("step {step} failed: {source}")]
pub struct SimulationError {
    pub step: usize,
    pub source: StepError,
    pub trajectory: Vec<StepResult>,
}

/// Steps `steps` times from `initial`, warm-starting each solve from the
/// previous solution. `guess_seed` randomizes the first step's guess.
pub fn simulate(
    system: &ContactSystem,
    initial: &RigidState,
    schedule: &WrenchSchedule,
    h: f64,
    steps: usize,
    config: &SolverConfig,
    guess_seed: Option<u64>,
) -> Result<Vec<StepResult>, SimulationError> {
    let mut trajectory = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(trajectory);
    }
    let fail = |step, source, trajectory| SimulationError {
        step,
        source,
        trajectory,
    };
    let mut warm = match initial_guess(initial, system, h, guess_seed) {
        Ok(w) => w,
        Err(e) => return Err(fail(0, e, trajectory)),
    };
    let mut state = initial.clone();
    for index in 0..steps {
        let wrench = schedule.applied(index, h);
        match step(&state, system, &wrench, h, config, &warm) {
            Ok(result) => {
                state = result.state.clone();
                warm = result.solution.clone();
                trajectory.push(result);
            }
            Err(e) => return Err(fail(index, e, trajectory)),
        }
    }
    Ok(trajectory)
}

/// Closest points found by solving the KKT rows alone.
#[derive(Debug, Clone, PartialEq)]
pub struct KktClosestPoints {
    pub a1: Point3<f64>,
    pub a2: Point3<f64>,
    pub k1: usize,
    pub multipliers: Vec<f64>,
    pub residual: f64,
}

impl KktClosestPoints {
    pub fn distance(&self) -> f64 {
        (self.a1 - self.a2).norm()
    }
}

/// Walks from `inside` toward `target` and returns the last point of the
/// body on that segment, by bisection on the body's max surface value.
fn exit_point(
    body: &ConvexBody,
    pose: &Pose,
    inside: &Point3<f64>,
    target: &Point3<f64>,
) -> Point3<f64> {
    let inside_value = body.max_value(inside, pose);
    if inside_value > 0.0 {
        return *inside;
    }
    if body.max_value(target, pose) <= 0.0 {
        return *target;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if body.max_value(&(inside + (target - inside) * mid), pose) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    inside + (target - inside) * lo
}

fn interior_point(body: &ConvexBody, pose: &Pose, toward: &Point3<f64>) -> Point3<f64> {
    match body.world_bounds(pose) {
        Some(b) => b.center(),
        // Half-space: step one unit inside below the reference point.
        None => {
            let a2 = oracle::project_onto_body(body, pose, toward);
            let n = body.gradients(&a2, pose)[0].normalize();
            a2 - n
        }
    }
}

/// Solves the closest-point KKT rows between two bodies on their own,
/// without any dynamics. Every object surface is tried as `k1`, most active
/// first, from a guess built by walking between the body interiors.
pub fn closest_points_kkt(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    config: &SolverConfig,
) -> Result<KktClosestPoints, StepError> {
    let m = a.surfaces.len();
    let nb = b.surfaces.len();
    let n = 6 + m + nb;
    let mut layout = VariableLayout::default();
    layout.push("a1", 3);
    layout.push("a2", 3);
    layout.push("l_object", m);
    layout.push("l_environment", nb);

    let ca = interior_point(a, pose_a, &Point3::origin());
    let cb = interior_point(b, pose_b, &ca);
    let ca = if a.is_environment() {
        interior_point(a, pose_a, &cb)
    } else {
        ca
    };
    let a1 = exit_point(a, pose_a, &ca, &cb);
    let a2 = exit_point(b, pose_b, &cb, &a1);

    let mut order: Vec<usize> = (0..m).collect();
    let values = a.values(&a1, pose_a);
    order.sort_by(|x, y| values[*y].total_cmp(&values[*x]));

    let mut best: Option<KktClosestPoints> = None;
    let mut last = None;
    for k1 in order {
        let z: Vec<usize> = (6..n).filter(|v| *v != 6 + k1).collect();
        let problem = MncpProblem::new(n, KKT_ROWS, z, layout.clone(), |x, eq, w| {
            let (wa, wb) = w.split_at_mut(m - 1);
            kkt_rows(
                a,
                pose_a,
                b,
                pose_b,
                k1,
                &point_at(x, 0),
                &point_at(x, 3),
                &x[6..6 + m],
                &x[6 + m..n],
                eq,
                wa,
                wb,
            );
        })
        .expect("layout is square by construction");

        let mut x0 = vec![0.0; n];
        x0[0..3].copy_from_slice(a1.coords.as_slice());
        x0[3..6].copy_from_slice(a2.coords.as_slice());
        let ga = a.gradients(&a1, pose_a)[k1];
        let gb = b.gradients(&a2, pose_b);
        x0[6 + k1] = (a1 - a2).norm() / ga.norm().max(1e-12);
        let jb = (0..nb)
            .max_by(|x, y| b.values(&a2, pose_b)[*x].total_cmp(&b.values(&a2, pose_b)[*y]))
            .unwrap_or(0);
        x0[6 + m + jb] = ga.norm() / gb[jb].norm().max(1e-12);

        let sol = mncp::solve(&problem, &x0, config);
        let found = KktClosestPoints {
            a1: point_at(&sol.x, 0),
            a2: point_at(&sol.x, 3),
            k1,
            multipliers: sol.x[6..].to_vec(),
            residual: sol.residual_norm,
        };
        // A negative cone scale points the normal into the body: wrong root.
        if sol.converged() && sol.x[6 + k1] >= -config.tolerance {
            if best
                .as_ref()
                .is_none_or(|b| found.distance() < b.distance())
            {
                best = Some(found);
            }
            break;
        }
        last = Some(StepError::SolverFailed {
            status: sol.status,
            residual: sol.residual_norm,
            iterations: sol.iterations,
        });
    }
    best.ok_or_else(|| last.expect("at least one surface"))
}
