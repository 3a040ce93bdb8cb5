//! Mixed nonlinear complementarity problems.
//!
//! A problem is a map from a flat unknown vector `x` to equality residuals
//! `g(x) = 0` and complementarity pairs `0 <= w_i(x) ⟂ x[z_i] >= 0`. Each
//! pair is folded into a single equation with the Fischer-Burmeister
//! function and the resulting square nonsmooth system is solved by a damped
//! semismooth Newton iteration with a finite-difference Jacobian.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MncpError {
    #[error("problem dimension mismatch: {n_eq} equalities + {n_c} pairs != {n} unknowns")]
    Dimension { n: usize, n_eq: usize, n_c: usize },
    #[error("complementarity variable index {0} out of range")]
    PairIndex(usize),
}

/// `a + b - sqrt(a^2 + b^2)`; zero exactly when `a >= 0`, `b >= 0`, `a b = 0`.
pub fn fischer_burmeister(a: f64, b: f64) -> f64 {
    a + b - a.hypot(b)
}

/// Named slices of the unknown vector, for diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableLayout {
    pub slices: Vec<(String, Range<usize>)>,
}

impl VariableLayout {
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let start = self.slices.last().map_or(0, |(_, r)| r.end);
        let range = start..start + len;
        self.slices.push((name.into(), range.clone()));
        range
    }

    pub fn len(&self) -> usize {
        self.slices.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        self.slices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }
}

type ResidualFn<'a> = dyn Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync + 'a;

/// Residual map: `residual(x, eq, w)` fills the equality residuals and the
/// `w` side of every complementarity pair.
pub struct MncpProblem<'a> {
    n: usize,
    n_eq: usize,
    z_index: Vec<usize>,
    layout: VariableLayout,
    residual: Box<ResidualFn<'a>>,
}

impl std::fmt::Debug for MncpProblem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MncpProblem")
            .field("n", &self.n)
            .field("n_eq", &self.n_eq)
            .field("z_index", &self.z_index)
            .finish_non_exhaustive()
    }
}

impl<'a> MncpProblem<'a> {
    pub fn new(
        n: usize,
        n_eq: usize,
        z_index: Vec<usize>,
        layout: VariableLayout,
        residual: impl Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync + 'a,
    ) -> Result<Self, MncpError> {
        if n_eq + z_index.len() != n {
            return Err(MncpError::Dimension {
                n,
                n_eq,
                n_c: z_index.len(),
            });
        }
        if let Some(&bad) = z_index.iter().find(|&&i| i >= n) {
            return Err(MncpError::PairIndex(bad));
        }
        Ok(Self {
            n,
            n_eq,
            z_index,
            layout,
            residual: Box::new(residual),
        })
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn num_equalities(&self) -> usize {
        self.n_eq
    }

    pub fn num_pairs(&self) -> usize {
        self.z_index.len()
    }

    pub fn pair_variables(&self) -> &[usize] {
        &self.z_index
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    /// Equality residuals and `w` values at `x`.
    pub fn evaluate(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut eq = vec![0.0; self.n_eq];
        let mut w = vec![0.0; self.z_index.len()];
        (self.residual)(x, &mut eq, &mut w);
        (eq, w)
    }

    fn fb_into(&self, x: &[f64], out: &mut [f64]) {
        let (eq, fb) = out.split_at_mut(self.n_eq);
        (self.residual)(x, eq, fb);
        for (r, &zi) in fb.iter_mut().zip(&self.z_index) {
            *r = fischer_burmeister(*r, x[zi]);
        }
    }

    /// Worst violation of the original conditions: equality residuals,
    /// negativity of either side of a pair, and pair products.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let (eq, w) = self.evaluate(x);
        let mut worst = eq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (wi, &zi) in w.iter().zip(&self.z_index) {
            let z = x[zi];
            worst = worst.max(-wi).max(-z).max((wi * z).abs());
        }
        worst
    }
}

/// Equality residuals followed by `fischer_burmeister(w_i(x), z_i)` per pair.
pub fn assemble_fb_residual(problem: &MncpProblem<'_>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; problem.n];
    problem.fb_into(x, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Euclidean norm of the FB residual accepted as converged.
    pub tolerance: f64,
    /// Newton iterations per attempt.
    pub max_iterations: usize,
    pub contraction: f64,
    pub sufficient_decrease: f64,
    pub max_restarts: usize,
    /// Relative forward-difference step.
    pub fd_step: f64,
    /// Use central differences with `central_step` instead of forward ones.
    pub central_differences: bool,
    /// Relative central-difference step.
    pub central_step: f64,
    /// Scale of the uniform perturbation applied to restart seeds.
    pub perturbation_scale: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 200,
            contraction: 0.5,
            sufficient_decrease: 1e-4,
            max_restarts: 10,
            fd_step: 1e-7,
            central_differences: true,
            central_step: 6e-6,
            perturbation_scale: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    SingularJacobian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MncpSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub restarts_used: usize,
    pub status: SolveStatus,
}

impl MncpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

struct Attempt {
    x: Vec<f64>,
    norm: f64,
    iterations: usize,
    status: SolveStatus,
}

/// Finite-difference Jacobian of the raw map `(g, w)`, with the
/// Fischer-Burmeister layer differentiated analytically on top. At the kink
/// `a = b = 0` the element `(1 - 1/sqrt 2, 1 - 1/sqrt 2)` of the generalized
/// Jacobian is used.
fn fb_jacobian(problem: &MncpProblem<'_>, x: &[f64], rel_step: f64, central: bool) -> DMatrix<f64> {
    let n = problem.n;
    let n_eq = problem.n_eq;
    let raw = |x: &[f64], out: &mut [f64]| {
        let (eq, w) = out.split_at_mut(n_eq);
        (problem.residual)(x, eq, w);
    };
    let mut base = vec![0.0; n];
    raw(x, &mut base);
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut up = vec![0.0; n];
    let mut down = vec![0.0; n];
    for j in 0..n {
        let h = rel_step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let hu = xp[j] - x[j];
        raw(&xp, &mut up);
        if central {
            xp[j] = x[j] - h;
            let hd = x[j] - xp[j];
            raw(&xp, &mut down);
            for i in 0..n {
                jac[(i, j)] = (up[i] - down[i]) / (hu + hd);
            }
        } else {
            for i in 0..n {
                jac[(i, j)] = (up[i] - base[i]) / hu;
            }
        }
        xp[j] = x[j];
    }
    for (k, &zi) in problem.z_index.iter().enumerate() {
        let row = n_eq + k;
        let (a, b) = (base[row], x[zi]);
        let r = a.hypot(b);
        let (da, db) = if r > 0.0 {
            (1.0 - a / r, 1.0 - b / r)
        } else {
            (
                1.0 - std::f64::consts::FRAC_1_SQRT_2,
                1.0 - std::f64::consts::FRAC_1_SQRT_2,
            )
        };
        for j in 0..n {
            jac[(row, j)] *= da;
        }
        jac[(row, zi)] += db;
    }
    jac
}

/// Singular value decomposition of the Jacobian with `U^T F` precomputed.
struct Decomposition {
    singular: DVector<f64>,
    proj: DVector<f64>,
    v: DMatrix<f64>,
}

impl Decomposition {
    fn new(jac: DMatrix<f64>, f: &DVector<f64>) -> Option<Self> {
        let svd = jac.svd(true, true);
        let (u, vt) = (svd.u?, svd.v_t?);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) || !smax.is_finite() {
            return None;
        }
        Some(Self {
            proj: u.transpose() * f,
            singular: svd.singular_values,
            v: vt.transpose(),
        })
    }

    /// Minimum-norm Gauss-Newton step, dropping numerically null directions.
    fn pseudo_inverse(&self) -> DVector<f64> {
        let cutoff = 1e-12 * self.singular.max();
        let coeffs = DVector::from_iterator(
            self.singular.len(),
            self.singular
                .iter()
                .zip(self.proj.iter())
                .map(|(s, p)| if *s > cutoff { -p / s } else { 0.0 }),
        );
        &self.v * coeffs
    }

    /// Levenberg-Marquardt direction `-(J^T J + lambda I)^{-1} J^T F`. With
    /// `lambda` tied to the residual it stays well defined when the Jacobian
    /// is rank deficient, as happens when the solution set is not isolated.
    fn levenberg_marquardt(&self, lambda: f64) -> DVector<f64> {
        let coeffs = DVector::from_iterator(
            self.singular.len(),
            self.singular
                .iter()
                .zip(self.proj.iter())
                .map(|(s, p)| -s * p / (s * s + lambda)),
        );
        &self.v * coeffs
    }
}

fn newton(problem: &MncpProblem<'_>, start: Vec<f64>, config: &SolverConfig) -> Attempt {
    let n = problem.n;
    let mut x = start;
    let mut f = vec![0.0; problem.n];
    problem.fb_into(&x, &mut f);
    let mut norm = DVector::from_column_slice(&f).norm();
    let initial_step = if config.central_differences {
        config.central_step
    } else {
        config.fd_step
    };
    let mut fd_step = initial_step;
    let mut trial = vec![0.0; n];
    let mut f_trial = vec![0.0; problem.n];
    let mut iterations = 0;

    while iterations < config.max_iterations {
        if norm <= config.tolerance {
            return Attempt {
                x,
                norm,
                iterations,
                status: SolveStatus::Converged,
            };
        }
        if !norm.is_finite() {
            break;
        }
        iterations += 1;
        let jac = fb_jacobian(problem, &x, fd_step, config.central_differences);
        let fv = DVector::from_column_slice(&f);
        let grad = jac.transpose() * &fv;
        let jnorm = jac.norm();
        let lambda = (norm * norm).min(norm * 1e-2).max(1e-20 * jnorm * jnorm);
        let Some(decomposition) = Decomposition::new(jac, &fv) else {
            return Attempt {
                x,
                norm,
                iterations,
                status: SolveStatus::SingularJacobian,
            };
        };
        let merit = 0.5 * norm * norm;

        // Full Gauss-Newton step first; it is exact on linear rows.
        let full = decomposition.pseudo_inverse();
        let full_slope = grad.dot(&full);
        if full_slope < 0.0 {
            for i in 0..n {
                trial[i] = x[i] + full[i];
            }
            problem.fb_into(&trial, &mut f_trial);
            let trial_norm = DVector::from_column_slice(&f_trial).norm();
            if trial_norm.is_finite()
                && 0.5 * trial_norm * trial_norm <= merit + config.sufficient_decrease * full_slope
            {
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut f, &mut f_trial);
                norm = trial_norm;
                continue;
            }
        }

        let mut dir = decomposition.levenberg_marquardt(lambda);
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            dir = -&grad;
            slope = -grad.norm_squared();
        }

        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            for i in 0..n {
                trial[i] = x[i] + t * dir[i];
            }
            problem.fb_into(&trial, &mut f_trial);
            let trial_norm = DVector::from_column_slice(&f_trial).norm();
            if trial_norm.is_finite()
                && 0.5 * trial_norm * trial_norm <= merit + config.sufficient_decrease * t * slope
            {
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut f, &mut f_trial);
                norm = trial_norm;
                accepted = true;
                break;
            }
            t *= config.contraction;
        }
        if !accepted {
            // A stale difference quotient can point uphill near kinks.
            if fd_step > initial_step * 1e-4 {
                fd_step *= 0.5;
                continue;
            }
            break;
        }
    }
    let status = if norm <= config.tolerance {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    Attempt {
        x,
        norm,
        iterations,
        status,
    }
}

/// Solves the problem from `x0`, restarting from perturbed copies of `x0`
/// on stagnation. Returns the best iterate found; failure is reported
/// through the status, never by panicking.
pub fn solve(problem: &MncpProblem<'_>, x0: &[f64], config: &SolverConfig) -> MncpSolution {
    assert_eq!(x0.len(), problem.n, "initial guess has the wrong dimension");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<Attempt> = None;
    let mut total_iterations = 0;
    for restart in 0..=config.max_restarts {
        let start = if restart == 0 {
            x0.to_vec()
        } else {
            x0.iter()
                .map(|v| {
                    v + config.perturbation_scale * (1.0 + v.abs()) * rng.random_range(-1.0..1.0)
                })
                .collect()
        };
        let attempt = newton(problem, start, config);
        total_iterations += attempt.iterations;
        let done = attempt.status == SolveStatus::Converged;
        if best.as_ref().is_none_or(|b| attempt.norm < b.norm) {
            best = Some(attempt);
        }
        if done {
            let best = best.expect("attempt recorded");
            return MncpSolution {
                x: best.x,
                residual_norm: best.norm,
                iterations: total_iterations,
                restarts_used: restart,
                status: SolveStatus::Converged,
            };
        }
    }
    let best = best.expect("at least one attempt");
    MncpSolution {
        x: best.x,
        residual_norm: best.norm,
        iterations: total_iterations,
        restarts_used: config.max_restarts,
        status: best.status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dim() -> MncpProblem<'static> {
        // 0 <= x - 1 ⟂ x >= 0
        let mut layout = VariableLayout::default();
        layout.push("x", 1);
        MncpProblem::new(1, 0, vec![0], layout, |x, _, w| w[0] = x[0] - 1.0).unwrap()
    }

    #[test]
    fn fb_values() {
        assert_eq!(fischer_burmeister(0.0, 0.0), 0.0);
        assert_eq!(fischer_burmeister(0.0, 5.0), 0.0);
        assert_eq!(fischer_burmeister(3.0, 4.0), 2.0);
        assert_eq!(fischer_burmeister(0.0, -1.0), -2.0);
    }

    #[test]
    fn residual_assembly() {
        let mut layout = VariableLayout::default();
        layout.push("x", 2);
        let p = MncpProblem::new(2, 2, vec![], layout, |x, eq, _| {
            eq[0] = x[0] - 1.0;
            eq[1] = 2.0 * x[1];
        })
        .unwrap();
        assert_eq!(assemble_fb_residual(&p, &[3.0, 4.0]), vec![2.0, 8.0]);

        let p = one_dim();
        assert_eq!(assemble_fb_residual(&p, &[1.0]), vec![0.0]);
        // z = x = 0, w = -1
        assert_eq!(assemble_fb_residual(&p, &[0.0]), vec![-2.0]);
    }

    #[test]
    fn dimension_checks() {
        let layout = VariableLayout::default();
        assert!(matches!(
            MncpProblem::new(2, 1, vec![], layout.clone(), |_, _, _| {}),
            Err(MncpError::Dimension { .. })
        ));
        assert_eq!(
            MncpProblem::new(1, 0, vec![3], layout, |_, _, _| {}).unwrap_err(),
            MncpError::PairIndex(3)
        );
    }

    #[test]
    fn linear_equalities_in_one_iteration() {
        let c = [1.5, -2.0, 0.25];
        let mut layout = VariableLayout::default();
        layout.push("x", 3);
        let p = MncpProblem::new(3, 3, vec![], layout, move |x, eq, _| {
            for i in 0..3 {
                eq[i] = x[i] - c[i];
            }
        })
        .unwrap();
        let sol = solve(&p, &[0.0; 3], &SolverConfig::default());
        assert!(sol.converged());
        assert_eq!(sol.iterations, 1);
        for (x, c) in sol.x.iter().zip(c) {
            assert!((x - c).abs() < 1e-10);
        }
    }

    #[test]
    fn one_dimensional_root() {
        let p = one_dim();
        let sol = solve(&p, &[5.0], &SolverConfig::default());
        assert!(sol.converged(), "{sol:?}");
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_dimensional_lcp() {
        // w = z + (-1, 2); the only root of the four active sets is z = (1, 0).
        let mut layout = VariableLayout::default();
        layout.push("z", 2);
        let p = MncpProblem::new(2, 0, vec![0, 1], layout, |x, _, w| {
            w[0] = x[0] - 1.0;
            w[1] = x[1] + 2.0;
        })
        .unwrap();
        for x0 in [[0.0, 0.0], [3.0, 3.0], [-1.0, 4.0]] {
            let sol = solve(&p, &x0, &SolverConfig::default());
            assert!(sol.converged());
            assert!(
                (sol.x[0] - 1.0).abs() < 1e-10 && sol.x[1].abs() < 1e-10,
                "{:?}",
                sol.x
            );
            let (_, w) = p.evaluate(&sol.x);
            assert!(w[0].abs() < 1e-10 && (w[1] - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        // Nonconvex scalar equation with a flat spot that forces restarts.
        let mut layout = VariableLayout::default();
        layout.push("x", 1);
        let p = MncpProblem::new(1, 1, vec![], layout, |x, eq, _| {
            eq[0] = (x[0] - 2.0).powi(3) + 0.5 * x[0].sin() - 0.1;
        })
        .unwrap();
        let a = solve(&p, &[0.0], &SolverConfig::default());
        let b = solve(&p, &[0.0], &SolverConfig::default());
        assert_eq!(a.x[0].to_bits(), b.x[0].to_bits());
        assert_eq!(
            (a.iterations, a.restarts_used),
            (b.iterations, b.restarts_used)
        );
    }

    #[test]
    fn layout_slices() {
        let mut l = VariableLayout::default();
        assert_eq!(l.push("nu", 6), 0..6);
        assert_eq!(l.push("patch0", 14), 6..20);
        assert_eq!(l.len(), 20);
        assert_eq!(l.get("patch0"), Some(6..20));
        assert_eq!(l.get("missing"), None);
    }
}
