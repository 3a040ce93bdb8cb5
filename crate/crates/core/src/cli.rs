//! Scenario files, experiment runs and their on-disk outputs.
//!
//! A run directory holds `trajectory.csv`, `certificates.csv`, `summary.txt`
//! and `plotdata/*.dat`. Column order of the CSV files is fixed; see
//! [`trajectory_header`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{self, TranslationStepInput};
use crate::geom::{ConvexBody, InertialParams, RigidState};
use crate::mncp::SolverConfig;
use crate::stepper::{
    self, ContactMode, ContactSystem, FrictionParams, Patch, StepResult, WrenchEntry,
    WrenchSchedule,
};
use crate::verify::{self, StepCertificate, Tolerances};

const UNIT_QUATERNION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Single,
    AnalyticCompare,
    Uniqueness,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Self::Single),
            "analytic-compare" => Ok(Self::AnalyticCompare),
            "uniqueness" => Ok(Self::Uniqueness),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeSpec {
    CappedCylinder { radius: f64, bottom: f64, top: f64 },
    Sphere { radius: f64 },
    Cuboid { half: [f64; 3] },
}

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn is_identity_rotation(r: &[f64; 4]) -> bool {
    *r == identity_rotation()
}

fn is_zero3(v: &[f64; 3]) -> bool {
    *v == [0.0; 3]
}

/// One convex part of the object, placed relative to the center of mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub shape: ShapeSpec,
    #[serde(default, skip_serializing_if = "is_zero3")]
    pub offset: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    #[serde(
        default = "identity_rotation",
        skip_serializing_if = "is_identity_rotation"
    )]
    pub rotation: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<FrictionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub mass: f64,
    /// Body-frame inertia about the center of mass, row-major.
    pub inertia: [[f64; 3]; 3],
    pub parts: Vec<PartSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub normal: [f64; 3],
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionSpec {
    pub mu: f64,
    #[serde(default = "one")]
    pub e_t: f64,
    #[serde(default = "one")]
    pub e_o: f64,
    #[serde(default = "one")]
    pub e_r: f64,
}

impl FrictionSpec {
    fn params(&self) -> Result<FrictionParams, ScenarioError> {
        FrictionParams::new(self.e_t, self.e_o, self.e_r, self.mu)
            .map_err(|e| ScenarioError::Validation(format!("friction: {e}")))
    }
}

/// Initial configuration `[x, y, z, w, qx, qy, qz]` and velocity
/// `[vx, vy, vz, wx, wy, wz]` (angular part in the world frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub q: [f64; 7],
    #[serde(default)]
    pub nu: [f64; 6],
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WrenchSpec {
    /// Constant force and moment over `[t_start, t_end)`.
    Interval {
        t_start: f64,
        t_end: f64,
        #[serde(default = "zero3")]
        force: [f64; 3],
        #[serde(default = "zero3")]
        moment: [f64; 3],
    },
    /// Impulse delivered within the single step nearest `time`.
    Impulse {
        time: f64,
        #[serde(default = "zero3")]
        linear: [f64; 3],
        #[serde(default = "zero3")]
        angular: [f64; 3],
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub central_differences: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub central_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_runs() -> usize {
    5
}

fn default_comparison_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Seeds of the randomized first-step guesses, one per run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Seed for single and analytic-compare runs; none means the plain guess.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess_seed: Option<u64>,
    /// Tolerance of the analytic and cross-run comparisons.
    #[serde(default = "default_comparison_tol")]
    pub tolerance: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Single,
            runs: default_runs(),
            seeds: None,
            guess_seed: None,
            tolerance: default_comparison_tol(),
        }
    }
}

fn default_gravity() -> f64 {
    9.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub h: f64,
    pub steps: usize,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub solver: SolverOverrides,
    pub friction: FrictionSpec,
    pub body: BodySpec,
    pub environment: EnvironmentSpec,
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wrench: Vec<WrenchSpec>,
}

fn line_column(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        ScenarioError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

/// Serializes a scenario in the same format [`load_scenario`] reads.
pub fn scenario_to_string(scenario: &Scenario) -> String {
    toml::to_string(scenario).expect("scenario types always serialize")
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Validation(msg));
        if !(self.h > 0.0) || !self.h.is_finite() {
            return bad(format!("step size h must be positive, got {}", self.h));
        }
        if !self.gravity.is_finite() || self.gravity < 0.0 {
            return bad(format!(
                "gravity must be finite and non-negative, got {}",
                self.gravity
            ));
        }
        self.friction.params()?;
        if self.body.parts.is_empty() {
            return bad("body needs at least one part".into());
        }
        for (i, part) in self.body.parts.iter().enumerate() {
            if let Some(f) = &part.friction {
                f.params()?;
            }
            if !finite(&part.offset) || !finite(&part.rotation) {
                return bad(format!("part {i}: non-finite placement"));
            }
            let norm = Vector3::new(part.rotation[1], part.rotation[2], part.rotation[3])
                .norm_squared()
                + part.rotation[0] * part.rotation[0];
            if (norm.sqrt() - 1.0).abs() > UNIT_QUATERNION_TOL {
                return bad(format!("part {i}: rotation is not a unit quaternion"));
            }
        }
        let q = &self.initial.q;
        if !finite(q) || !finite(&self.initial.nu) {
            return bad("initial state has non-finite entries".into());
        }
        let qn = (q[3] * q[3] + q[4] * q[4] + q[5] * q[5] + q[6] * q[6]).sqrt();
        if (qn - 1.0).abs() > UNIT_QUATERNION_TOL {
            return bad(format!("initial quaternion has norm {qn}, expected 1"));
        }
        for (i, w) in self.wrench.iter().enumerate() {
            let ok = match w {
                WrenchSpec::Interval {
                    t_start,
                    t_end,
                    force,
                    moment,
                } => {
                    t_start.is_finite()
                        && t_end.is_finite()
                        && t_start <= t_end
                        && finite(force)
                        && finite(moment)
                }
                WrenchSpec::Impulse {
                    time,
                    linear,
                    angular,
                } => time.is_finite() && *time >= 0.0 && finite(linear) && finite(angular),
            };
            if !ok {
                return bad(format!("wrench entry {i} is malformed"));
            }
        }
        let e = &self.experiment;
        if !(e.tolerance > 0.0) {
            return bad("experiment tolerance must be positive".into());
        }
        if e.mode == Mode::Uniqueness && e.runs < 2 {
            return bad("uniqueness mode needs at least two runs".into());
        }
        if let Some(seeds) = &e.seeds {
            if seeds.len() != e.runs {
                return bad(format!("{} seeds given for {} runs", seeds.len(), e.runs));
            }
        }
        self.system()?;
        Ok(())
    }

    pub fn system(&self) -> Result<ContactSystem, ScenarioError> {
        let inertia = InertialParams::new(
            self.body.mass,
            Matrix3::from_fn(|r, c| self.body.inertia[r][c]),
        )
        .map_err(|e| ScenarioError::Validation(format!("body: {e}")))?;
        let env = &self.environment;
        let ground = ConvexBody::half_space(Vector3::from(env.normal), env.offset)
            .map_err(|e| ScenarioError::Validation(format!("environment: {e}")))?;
        let shared = self.friction.params()?;
        let mut patches = Vec::with_capacity(self.body.parts.len());
        for (i, part) in self.body.parts.iter().enumerate() {
            let body = match &part.shape {
                ShapeSpec::CappedCylinder {
                    radius,
                    bottom,
                    top,
                } => ConvexBody::capped_cylinder(*radius, *bottom, *top),
                ShapeSpec::Sphere { radius } => ConvexBody::sphere(*radius),
                ShapeSpec::Cuboid { half } => ConvexBody::cuboid(Vector3::from(*half)),
            }
            .map_err(|e| ScenarioError::Validation(format!("part {i}: {e}")))?;
            let r = part.rotation;
            let rotation = UnitQuaternion::from_quaternion(Quaternion::new(r[0], r[1], r[2], r[3]));
            let offset =
                Isometry3::from_parts(Translation3::from(Vector3::from(part.offset)), rotation);
            let friction = match &part.friction {
                Some(f) => f.params()?,
                None => shared,
            };
            patches.push(Patch {
                object: body.with_offset(offset),
                environment: ground.clone(),
                friction,
            });
        }
        ContactSystem::new(inertia, self.gravity, patches)
            .map_err(|e| ScenarioError::Validation(e.to_string()))
    }

    pub fn initial_state(&self) -> RigidState {
        let q = &self.initial.q;
        let nu = &self.initial.nu;
        RigidState {
            position: Vector3::new(q[0], q[1], q[2]),
            orientation: UnitQuaternion::from_quaternion(Quaternion::new(q[3], q[4], q[5], q[6])),
            linear_velocity: Vector3::new(nu[0], nu[1], nu[2]),
            angular_velocity: Vector3::new(nu[3], nu[4], nu[5]),
        }
    }

    pub fn schedule(&self) -> WrenchSchedule {
        let entries = self
            .wrench
            .iter()
            .map(|w| match w {
                WrenchSpec::Interval {
                    t_start,
                    t_end,
                    force,
                    moment,
                } => WrenchEntry::Interval {
                    t_start: *t_start,
                    t_end: *t_end,
                    force: Vector3::from(*force),
                    moment: Vector3::from(*moment),
                },
                WrenchSpec::Impulse {
                    time,
                    linear,
                    angular,
                } => WrenchEntry::Impulse {
                    time: *time,
                    linear: Vector3::from(*linear),
                    angular: Vector3::from(*angular),
                },
            })
            .collect();
        WrenchSchedule { entries }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let mut c = SolverConfig::default();
        let o = &self.solver;
        if let Some(v) = o.tolerance {
            c.tolerance = v;
        }
        if let Some(v) = o.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = o.max_restarts {
            c.max_restarts = v;
        }
        if let Some(v) = o.central_differences {
            c.central_differences = v;
        }
        if let Some(v) = o.central_step {
            c.central_step = v;
        }
        if let Some(v) = o.fd_step {
            c.fd_step = v;
        }
        if let Some(v) = o.perturbation_scale {
            c.perturbation_scale = v;
        }
        if let Some(v) = o.seed {
            c.seed = v;
        }
        c
    }

    /// Seeds of the uniqueness runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        match &self.experiment.seeds {
            Some(s) => s.clone(),
            None => (1..=self.experiment.runs as u64).collect(),
        }
    }
}

/// A simulated trajectory and its certificates; `failure` is set when the
/// solver stopped early.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub steps: Vec<StepResult>,
    pub certificates: Vec<StepCertificate>,
    pub failure: Option<stepper::SimulationError>,
}

impl RunTrace {
    pub fn converged(&self) -> bool {
        self.failure.is_none()
    }

    pub fn certified(&self) -> bool {
        self.certificates.iter().all(|c| c.passed)
    }
}

/// Simulates a scenario with the given first-step guess seed and certifies
/// every completed step.
pub fn simulate_scenario(
    scenario: &Scenario,
    seed: Option<u64>,
) -> Result<RunTrace, ScenarioError> {
    let system = scenario.system()?;
    let result = stepper::simulate(
        &system,
        &scenario.initial_state(),
        &scenario.schedule(),
        scenario.h,
        scenario.steps,
        &scenario.solver_config(),
        seed,
    );
    let (steps, failure) = match result {
        Ok(t) => (t, None),
        Err(e) => (e.trajectory.clone(), Some(e)),
    };
    let tol = Tolerances::default();
    let certificates = steps
        .iter()
        .map(|r| verify::certify_step(r, &system, &tol))
        .collect();
    Ok(RunTrace {
        steps,
        certificates,
        failure,
    })
}

/// Column names of `trajectory.csv` for `patches` contact patches.
pub fn trajectory_header(patches: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step", "time", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 1..=patches {
        for f in [
            "a1x", "a1y", "a1z", "a2x", "a2y", "a2z", "p_n", "p_t", "p_o", "p_r", "sigma", "mode",
        ] {
            h.push(format!("patch{i}_{f}"));
        }
    }
    h.push("certified".into());
    h.push("iterations".into());
    h
}

fn trajectory_row(index: usize, h: f64, r: &StepResult, cert: &StepCertificate) -> Vec<String> {
    let s = &r.state;
    let q = s.orientation.quaternion();
    let mut row = vec![index.to_string(), ((index + 1) as f64 * h).to_string()];
    let values = [
        s.position.x,
        s.position.y,
        s.position.z,
        q.w,
        q.i,
        q.j,
        q.k,
        s.linear_velocity.x,
        s.linear_velocity.y,
        s.linear_velocity.z,
        s.angular_velocity.x,
        s.angular_velocity.y,
        s.angular_velocity.z,
    ];
    row.extend(values.iter().map(f64::to_string));
    for (p, mode) in r.patches.iter().zip(&r.modes) {
        let v = [
            p.a1.x, p.a1.y, p.a1.z, p.a2.x, p.a2.y, p.a2.z, p.p_n, p.p_t, p.p_o, p.p_r, p.sigma,
        ];
        row.extend(v.iter().map(f64::to_string));
        row.push(mode.label().to_string());
    }
    row.push(if cert.passed { "1" } else { "0" }.to_string());
    row.push(r.diagnostics.iterations.to_string());
    row
}

pub const CERTIFICATE_HEADER: [&str; 12] = [
    "step",
    "patch",
    "touching",
    "boundary_object",
    "boundary_environment",
    "normal_x",
    "normal_y",
    "normal_z",
    "penetration_depth",
    "complementarity",
    "passed",
    "error",
];

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_plot(dir: &Path, name: &str, label: &str, points: &[(f64, f64)]) -> Result<(), RunError> {
    let mut text = format!("time {label}\n");
    for (t, v) in points {
        let _ = writeln!(text, "{t} {v}");
    }
    let path = dir.join(format!("{name}.dat"));
    fs::write(&path, text).map_err(io_err(&path))
}

type Column = dyn Fn(&StepResult) -> f64;

/// Writes `trajectory.csv`, `certificates.csv` and `plotdata/` into `dir`.
pub fn write_run_files(dir: &Path, scenario: &Scenario, trace: &RunTrace) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let patches = scenario.body.parts.len();
    let h = scenario.h;
    write_csv(
        &dir.join("trajectory.csv"),
        &trajectory_header(patches),
        trace
            .steps
            .iter()
            .zip(&trace.certificates)
            .enumerate()
            .map(|(i, (r, c))| trajectory_row(i, h, r, c)),
    )?;

    let cert_header: Vec<String> = CERTIFICATE_HEADER.iter().map(|s| s.to_string()).collect();
    let cert_rows = trace.certificates.iter().enumerate().flat_map(|(i, c)| {
        c.patches.iter().enumerate().map(move |(j, p)| {
            let normal: [String; 3] = match p.hyperplane {
                Some(d) => [d.x.to_string(), d.y.to_string(), d.z.to_string()],
                None => Default::default(),
            };
            let [nx, ny, nz] = normal;
            vec![
                i.to_string(),
                (j + 1).to_string(),
                (p.touching as u8).to_string(),
                p.boundary_object.to_string(),
                p.boundary_environment.to_string(),
                nx,
                ny,
                nz,
                p.penetration_depth.to_string(),
                p.complementarity.to_string(),
                (p.passed as u8).to_string(),
                p.hyperplane_error
                    .as_ref()
                    .map(|e| e.to_string())
                    .unwrap_or_default(),
            ]
        })
    });
    write_csv(&dir.join("certificates.csv"), &cert_header, cert_rows)?;

    let plot_dir = dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(io_err(&plot_dir))?;
    let times: Vec<f64> = (0..trace.steps.len()).map(|i| (i + 1) as f64 * h).collect();
    let series = |f: &dyn Fn(&StepResult) -> f64| -> Vec<(f64, f64)> {
        times
            .iter()
            .cloned()
            .zip(trace.steps.iter().map(f))
            .collect()
    };
    let state: [(&str, &Column); 9] = [
        ("com_x", &|r| r.state.position.x),
        ("com_y", &|r| r.state.position.y),
        ("com_z", &|r| r.state.position.z),
        ("v_x", &|r| r.state.linear_velocity.x),
        ("v_y", &|r| r.state.linear_velocity.y),
        ("v_z", &|r| r.state.linear_velocity.z),
        ("w_x", &|r| r.state.angular_velocity.x),
        ("w_y", &|r| r.state.angular_velocity.y),
        ("w_z", &|r| r.state.angular_velocity.z),
    ];
    for (name, f) in state {
        write_plot(&plot_dir, name, name, &series(f))?;
    }
    let sums: [(&str, &Column); 4] = [
        ("sum_p_n", &|r| r.patches.iter().map(|p| p.p_n).sum()),
        ("sum_p_t", &|r| r.patches.iter().map(|p| p.p_t).sum()),
        ("sum_p_o", &|r| r.patches.iter().map(|p| p.p_o).sum()),
        ("sum_p_r", &|r| r.patches.iter().map(|p| p.p_r).sum()),
    ];
    for (name, f) in sums {
        write_plot(&plot_dir, name, name, &series(f))?;
    }
    for i in 0..patches {
        for (axis, k) in [("x", 0), ("y", 1), ("z", 2)] {
            let name = format!("ecp{}_{axis}", i + 1);
            write_plot(&plot_dir, &name, &name, &series(&|r| r.patches[i].a1[k]))?;
        }
    }
    Ok(())
}

/// Per-step comparison of a run against the closed-form translation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticComparison {
    /// `[p_t, p_o, q_x, q_y]` absolute errors per step.
    pub errors: Vec<[f64; 4]>,
    /// `|sum p_n - analytic|` and `|sum p_r|` per step.
    pub normal_errors: Vec<[f64; 2]>,
    /// Set when the closed form stopped applying (sticking or lift-off).
    pub analytic_error: Option<analytic::AnalyticError>,
}

impl AnalyticComparison {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn max_normal_error(&self) -> f64 {
        self.normal_errors
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::max)
    }
}

/// Compares summed tangential impulses and the planar position against the
/// closed form, step by step, using the first patch's contact frame.
pub fn compare_with_analytic(
    scenario: &Scenario,
    steps: &[StepResult],
) -> Result<AnalyticComparison, ScenarioError> {
    let system = scenario.system()?;
    let frame = *system.frame(0);
    let schedule = scenario.schedule();
    let start = scenario.initial_state();
    let m = system.inertia.mass;
    let gravity = Vector3::new(0.0, 0.0, -m * scenario.gravity * scenario.h);
    let mut input = TranslationStepInput {
        mass: m,
        frame,
        velocity: start.linear_velocity,
        applied: Vector3::zeros(),
        friction: system.patches[0].friction,
    };
    let mut position = start.position;
    let mut out = AnalyticComparison {
        errors: Vec::with_capacity(steps.len()),
        normal_errors: Vec::with_capacity(steps.len()),
        analytic_error: None,
    };
    for (i, r) in steps.iter().enumerate() {
        input.applied = schedule.applied(i, scenario.h).linear + gravity;
        let a = match analytic::pure_translation_step(&input) {
            Ok(a) => a,
            Err(analytic::AnalyticError::Sticking { .. }) => {
                out.analytic_error = Some(analytic::AnalyticError::Sticking { step: i });
                break;
            }
            Err(e) => {
                out.analytic_error = Some(e);
                break;
            }
        };
        position += a.velocity * scenario.h;
        input.velocity = a.velocity;
        let sum = |f: fn(&stepper::ContactPatchVars) -> f64| r.patches.iter().map(f).sum::<f64>();
        let dq = r.state.position - position;
        out.errors.push([
            (sum(|p| p.p_t) - a.p_t).abs(),
            (sum(|p| p.p_o) - a.p_o).abs(),
            frame.t.dot(&dq).abs(),
            frame.o.dot(&dq).abs(),
        ]);
        out.normal_errors.push([
            (sum(|p| p.p_n) - a.p_n).abs(),
            (sum(|p| p.p_r) - a.p_r).abs(),
        ]);
    }
    Ok(out)
}

/// Cross-run spread of a set of trajectories over the common step range.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    /// Max deviation of q and nu per step.
    pub state: Vec<f64>,
    /// Max deviation of each patch's `a1` per step, indexed `[patch][step]`.
    pub ecp: Vec<Vec<f64>>,
    /// Leading steps where every patch of every run is touching.
    pub sliding_steps: usize,
    /// First step after sliding where all patches touch again in some run,
    /// or the number of steps.
    pub relanding_step: usize,
}

impl UniquenessReport {
    pub fn max_state(&self) -> f64 {
        self.state.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest deviation of the first patch's ECP during the sliding phase.
    pub fn ecp1_sliding(&self) -> f64 {
        self.ecp.first().map_or(0.0, |e| {
            e[..self.sliding_steps].iter().cloned().fold(0.0, f64::max)
        })
    }

    /// Largest deviation of any ECP between the end of sliding and the next
    /// step where all patches touch again.
    pub fn ecp_point_contact(&self) -> f64 {
        self.ecp
            .iter()
            .flat_map(|e| e[self.sliding_steps..self.relanding_step].iter())
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Largest deviation of any ECP after the sliding phase.
    pub fn ecp_after_sliding(&self) -> f64 {
        self.ecp
            .iter()
            .flat_map(|e| e[self.sliding_steps..].iter())
            .cloned()
            .fold(0.0, f64::max)
    }
}

pub fn uniqueness_report(runs: &[Vec<StepResult>]) -> UniquenessReport {
    let steps = runs.iter().map(Vec::len).min().unwrap_or(0);
    let patches = runs
        .first()
        .and_then(|r| r.first())
        .map_or(0, |s| s.patches.len());
    let spread = |values: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    };
    let mut state = Vec::with_capacity(steps);
    let mut ecp = vec![Vec::with_capacity(steps); patches];
    for k in 0..steps {
        let mut worst = 0.0f64;
        for c in 0..13 {
            let mut it = runs.iter().map(|r| {
                let s = &r[k].state;
                let q = s.configuration();
                let nu = s.velocity();
                if c < 7 {
                    q[c]
                } else {
                    nu[c - 7]
                }
            });
            worst = worst.max(spread(&mut it));
        }
        state.push(worst);
        for (p, series) in ecp.iter_mut().enumerate() {
            let mut worst = 0.0f64;
            for c in 0..3 {
                worst = worst.max(spread(&mut runs.iter().map(|r| r[k].patches[p].a1[c])));
            }
            series.push(worst);
        }
    }
    let sliding_steps = (0..steps)
        .take_while(|&k| {
            runs.iter()
                .all(|r| r[k].modes.iter().all(|m| *m == ContactMode::Touching))
        })
        .count();
    let all_touching = |k: usize| {
        runs.iter()
            .any(|r| r[k].modes.iter().all(|m| *m == ContactMode::Touching))
    };
    let relanding_step = (sliding_steps..steps)
        .find(|&k| all_touching(k))
        .unwrap_or(steps);
    UniquenessReport {
        state,
        ecp,
        sliding_steps,
        relanding_step,
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Success,
    SolverFailure,
    CertificateFailure,
    ComparisonFailure,
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Success => 0,
            Self::SolverFailure => 3,
            Self::CertificateFailure => 4,
            Self::ComparisonFailure => 5,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::SolverFailure => "solver-failure",
            Self::CertificateFailure => "certificate-failure",
            Self::ComparisonFailure => "comparison-failure",
        }
    }
}

/// Command-line overrides of the scenario's experiment settings.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub summary: String,
}

fn trace_summary(text: &mut String, label: &str, scenario: &Scenario, trace: &RunTrace) {
    let failed_certs = trace.certificates.iter().filter(|c| !c.passed).count();
    let max_pen = trace
        .certificates
        .iter()
        .map(|c| c.max_penetration())
        .fold(0.0, f64::max);
    let iterations: Vec<usize> = trace
        .steps
        .iter()
        .map(|s| s.diagnostics.iterations)
        .collect();
    let max_it = iterations.iter().cloned().max().unwrap_or(0);
    let mean_it = if iterations.is_empty() {
        0.0
    } else {
        iterations.iter().sum::<usize>() as f64 / iterations.len() as f64
    };
    let _ = writeln!(text, "[{label}]");
    let _ = writeln!(
        text,
        "steps completed: {} of {}",
        trace.steps.len(),
        scenario.steps
    );
    match &trace.failure {
        Some(f) => {
            let _ = writeln!(text, "solver: failed at step {}: {}", f.step, f.source);
        }
        None => {
            let _ = writeln!(text, "solver: all steps converged");
        }
    }
    let _ = writeln!(text, "solver iterations: mean {mean_it:.1}, max {max_it}");
    let _ = writeln!(text, "certificates: {} failed", failed_certs);
    let _ = writeln!(text, "max penetration depth: {max_pen:e} m");
}

fn trace_status(trace: &RunTrace) -> RunStatus {
    if !trace.converged() {
        RunStatus::SolverFailure
    } else if !trace.certified() {
        RunStatus::CertificateFailure
    } else {
        RunStatus::Success
    }
}

fn write_failure_record(
    dir: &Path,
    status: RunStatus,
    traces: &[(String, &RunTrace)],
) -> Result<(), RunError> {
    let mut text = String::new();
    let _ = writeln!(text, "status = \"{}\"", status.label());
    for (label, trace) in traces {
        let _ = writeln!(text, "\n[[run]]\nlabel = \"{label}\"");
        if let Some(f) = &trace.failure {
            let _ = writeln!(text, "failed_step = {}", f.step);
            let _ = writeln!(text, "error = {:?}", f.source.to_string());
        }
        let bad: Vec<String> = trace
            .certificates
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.passed)
            .map(|(i, _)| i.to_string())
            .collect();
        let _ = writeln!(text, "failed_certificates = [{}]", bad.join(", "));
    }
    let path = dir.join("failure.toml");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Executes the scenario's experiment and writes all outputs into `out`.
pub fn run(scenario: &Scenario, out: &Path, options: &RunOptions) -> Result<RunOutcome, RunError> {
    let mut scenario = scenario.clone();
    if let Some(m) = options.mode {
        scenario.experiment.mode = m;
    }
    if let Some(r) = options.runs {
        scenario.experiment.runs = r;
        scenario.experiment.seeds = None;
    }
    if let Some(t) = options.tolerance {
        scenario.experiment.tolerance = t;
    }
    if let Some(s) = options.seed {
        scenario.experiment.guess_seed = Some(s);
        if scenario.experiment.seeds.is_none() || options.runs.is_some() {
            scenario.experiment.seeds = Some((s..s + scenario.experiment.runs as u64).collect());
        }
    }
    scenario.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let tol = scenario.experiment.tolerance;

    let mut text = String::new();
    let _ = writeln!(text, "scenario: {}", scenario.name);
    let _ = writeln!(text, "mode: {:?}", scenario.experiment.mode);
    let _ = writeln!(
        text,
        "h = {}, steps = {}, gravity = {}",
        scenario.h, scenario.steps, scenario.gravity
    );
    let f = &scenario.friction;
    let _ = writeln!(
        text,
        "friction: mu = {}, e = ({}, {}, {})",
        f.mu, f.e_t, f.e_o, f.e_r
    );
    if !scenario.notes.is_empty() {
        let _ = writeln!(text, "notes: {}", scenario.notes);
    }

    let status = match scenario.experiment.mode {
        Mode::Single | Mode::AnalyticCompare => {
            let trace = simulate_scenario(&scenario, scenario.experiment.guess_seed)?;
            write_run_files(out, &scenario, &trace)?;
            trace_summary(&mut text, "run", &scenario, &trace);
            let mut status = trace_status(&trace);
            if scenario.experiment.mode == Mode::AnalyticCompare {
                let cmp = compare_with_analytic(&scenario, &trace.steps)?;
                write_comparison(out, &cmp)?;
                let _ = writeln!(text, "[analytic comparison]");
                let _ = writeln!(text, "steps compared: {}", cmp.errors.len());
                let _ = writeln!(
                    text,
                    "max |numeric - analytic| over (sum p_t, sum p_o, q_x, q_y): {:e} (tolerance {tol:e})",
                    cmp.max_error()
                );
                let _ = writeln!(
                    text,
                    "max |sum p_n - analytic|, |sum p_r|: {:e}",
                    cmp.max_normal_error()
                );
                if let Some(e) = &cmp.analytic_error {
                    let _ = writeln!(text, "closed form stopped: {e}");
                }
                if status == RunStatus::Success
                    && (cmp.max_error() > tol || cmp.errors.len() < trace.steps.len())
                {
                    status = RunStatus::ComparisonFailure;
                }
            }
            if status != RunStatus::Success {
                write_failure_record(out, status, &[("run".into(), &trace)])?;
            }
            status
        }
        Mode::Uniqueness => {
            let seeds = scenario.run_seeds();
            let traces: Vec<Result<RunTrace, ScenarioError>> = std::thread::scope(|s| {
                let handles: Vec<_> = seeds
                    .iter()
                    .map(|seed| {
                        let sc = &scenario;
                        s.spawn(move || simulate_scenario(sc, Some(*seed)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("run thread panicked"))
                    .collect()
            });
            let traces = traces.into_iter().collect::<Result<Vec<_>, _>>()?;
            let mut status = RunStatus::Success;
            let mut labelled = Vec::new();
            let mut paths = Vec::new();
            for (k, (trace, seed)) in traces.iter().zip(&seeds).enumerate() {
                let dir = out.join(format!("run{}", k + 1));
                write_run_files(&dir, &scenario, trace)?;
                paths.push(dir.join("trajectory.csv"));
                trace_summary(
                    &mut text,
                    &format!("run {} (seed {seed})", k + 1),
                    &scenario,
                    trace,
                );
                let s = trace_status(trace);
                if status == RunStatus::Success {
                    status = s;
                }
                labelled.push((format!("run{}", k + 1), trace));
            }
            let runs: Vec<Vec<StepResult>> = traces.iter().map(|t| t.steps.clone()).collect();
            let report = uniqueness_report(&runs);
            let deviation = compare_runs(&paths);
            let _ = writeln!(text, "[cross-run comparison]");
            let _ = writeln!(
                text,
                "max state deviation (q, nu): {:e} (tolerance {tol:e})",
                report.max_state()
            );
            let _ = writeln!(
                text,
                "sliding steps (all patches touching in every run): {}",
                report.sliding_steps
            );
            let _ = writeln!(
                text,
                "max ECP1 deviation while sliding: {:e}",
                report.ecp1_sliding()
            );
            let _ = writeln!(
                text,
                "max ECP deviation in point contact (steps {}..{}): {:e}",
                report.sliding_steps,
                report.relanding_step,
                report.ecp_point_contact()
            );
            let _ = writeln!(
                text,
                "max ECP deviation from step {} on (surface contact again, not unique): {:e}",
                report.relanding_step,
                report.ecp_after_sliding()
            );
            match deviation {
                Ok(d) => {
                    write_deviation(out, &d)?;
                    let _ = writeln!(
                        text,
                        "trajectory files: state columns {:e}, contact columns {:e}",
                        d.state_max(),
                        d.contact_max()
                    );
                }
                Err(e) => {
                    let _ = writeln!(text, "trajectory comparison failed: {e}");
                }
            }
            if status == RunStatus::Success
                && (report.max_state() > tol || report.ecp_point_contact() > tol)
            {
                status = RunStatus::ComparisonFailure;
            }
            if status != RunStatus::Success {
                write_failure_record(out, status, &labelled)?;
            }
            status
        }
    };
    let _ = writeln!(text, "status: {}", status.label());
    let path = out.join("summary.txt");
    fs::write(&path, &text).map_err(io_err(&path))?;
    Ok(RunOutcome {
        status,
        summary: text,
    })
}

fn write_comparison(dir: &Path, cmp: &AnalyticComparison) -> Result<(), RunError> {
    let header: Vec<String> = [
        "step", "err_p_t", "err_p_o", "err_q_x", "err_q_y", "err_p_n", "abs_p_r",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = cmp
        .errors
        .iter()
        .zip(&cmp.normal_errors)
        .enumerate()
        .map(|(i, (e, n))| {
            let mut row = vec![i.to_string()];
            row.extend(e.iter().chain(n.iter()).map(f64::to_string));
            row
        });
    write_csv(&dir.join("analytic_comparison.csv"), &header, rows)
}

fn write_deviation(dir: &Path, d: &DeviationReport) -> Result<(), RunError> {
    let header: Vec<String> = ["column", "kind", "max_deviation"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = d.columns.iter().map(|c| {
        vec![
            c.name.clone(),
            c.kind.label().to_string(),
            c.max.to_string(),
        ]
    });
    write_csv(&dir.join("deviation.csv"), &header, rows)
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("need at least two trajectories, got {0}")]
    TooFew(usize),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: csv::Error },
    #[error("step grids differ: {0}")]
    GridMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    State,
    Contact,
}

impl ColumnKind {
    fn label(&self) -> &'static str {
        match self {
            Self::State => "state",
            Self::Contact => "contact",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDeviation {
    pub name: String,
    pub kind: ColumnKind,
    pub max: f64,
    /// Deviation at every step.
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub steps: usize,
    pub columns: Vec<ColumnDeviation>,
}

impl DeviationReport {
    fn kind_max(&self, kind: ColumnKind) -> f64 {
        self.columns
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.max)
            .fold(0.0, f64::max)
    }

    pub fn state_max(&self) -> f64 {
        self.kind_max(ColumnKind::State)
    }

    pub fn contact_max(&self) -> f64 {
        self.kind_max(ColumnKind::Contact)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDeviation> {
        self.columns.iter().find(|c| c.name == name)
    }
}

fn column_kind(name: &str) -> Option<ColumnKind> {
    const STATE: [&str; 13] = [
        "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
    ];
    if STATE.contains(&name) {
        Some(ColumnKind::State)
    } else if name.starts_with("patch") && !name.ends_with("_mode") {
        Some(ColumnKind::Contact)
    } else {
        None
    }
}

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_table(path: &Path) -> Result<Table, CompareError> {
    let read = |source| CompareError::Read {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(read)?;
    let header = r
        .headers()
        .map_err(read)?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(read)?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// Per-column maximum absolute cross-run deviation of trajectory files.
pub fn compare_runs(paths: &[PathBuf]) -> Result<DeviationReport, CompareError> {
    if paths.len() < 2 {
        return Err(CompareError::TooFew(paths.len()));
    }
    let tables = paths
        .iter()
        .map(|p| read_table(p))
        .collect::<Result<Vec<_>, _>>()?;
    let (header, first) = &tables[0];
    for (path, (h, rows)) in paths.iter().zip(&tables).skip(1) {
        if h != header {
            return Err(CompareError::GridMismatch(format!(
                "{} has different columns",
                path.display()
            )));
        }
        if rows.len() != first.len() {
            return Err(CompareError::GridMismatch(format!(
                "{} has {} steps, expected {}",
                path.display(),
                rows.len(),
                first.len()
            )));
        }
        let time = header.iter().position(|c| c == "time");
        for (a, b) in rows.iter().zip(first) {
            if let Some(t) = time {
                let (ta, tb): (f64, f64) = (
                    a[t].parse().unwrap_or(f64::NAN),
                    b[t].parse().unwrap_or(f64::NAN),
                );
                if !((ta - tb).abs() <= 1e-12 * tb.abs().max(1.0)) {
                    return Err(CompareError::GridMismatch(format!(
                        "{} differs in time",
                        path.display()
                    )));
                }
            }
        }
    }
    let mut columns = Vec::new();
    for (c, name) in header.iter().enumerate() {
        let Some(kind) = column_kind(name) else {
            continue;
        };
        let mut per_step = Vec::with_capacity(first.len());
        for k in 0..first.len() {
            let (lo, hi) =
                tables
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, rows)| {
                        let v: f64 = rows[k][c].parse().unwrap_or(f64::NAN);
                        (lo.min(v), hi.max(v))
                    });
            per_step.push(if hi >= lo { hi - lo } else { f64::NAN });
        }
        let max = per_step.iter().cloned().fold(0.0, f64::max);
        columns.push(ColumnDeviation {
            name: name.clone(),
            kind,
            max,
            per_step,
        });
    }
    Ok(DeviationReport {
        steps: first.len(),
        columns,
    })
}
