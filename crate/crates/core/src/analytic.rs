//! Closed-form impulse sums for a body translating on a plane with isotropic
//! elliptic friction. Used as ground truth for the translating-table runs.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::ContactFrame;
use crate::stepper::FrictionParams;

/// Tolerance on `n . v` for the surface-contact precondition.
pub const NORMAL_SPEED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error("normal velocity {0} is not zero; the body is not sliding on the plane")]
    NotInSurfaceContact(f64),
    #[error("friction is not isotropic (e_t = {e_t}, e_o = {e_o})")]
    Anisotropic { e_t: f64, e_o: f64 },
    #[error("applied impulse does not press the body onto the plane (n . J = {0})")]
    NoNormalLoad(f64),
    #[error("slip stops at step {step}; the closed form only covers sliding")]
    Sticking { step: usize },
    #[error("invalid mass {0}")]
    InvalidMass(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationStepInput {
    pub mass: f64,
    pub frame: ContactFrame,
    /// Velocity at the start of the step.
    pub velocity: Vector3<f64>,
    /// Applied impulse over the step, gravity included.
    pub applied: Vector3<f64>,
    pub friction: FrictionParams,
}

/// Summed contact impulses over all patches and the end-of-step velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationStep {
    pub velocity: Vector3<f64>,
    pub p_t: f64,
    pub p_o: f64,
    pub p_r: f64,
    pub p_n: f64,
}

pub fn pure_translation_step(
    input: &TranslationStepInput,
) -> Result<TranslationStep, AnalyticError> {
    step_at(input, 0)
}

fn step_at(input: &TranslationStepInput, index: usize) -> Result<TranslationStep, AnalyticError> {
    let TranslationStepInput {
        mass,
        frame,
        velocity,
        applied,
        friction,
    } = input;
    if !(*mass > 0.0) || !mass.is_finite() {
        return Err(AnalyticError::InvalidMass(*mass));
    }
    let vn = frame.n.dot(velocity);
    if vn.abs() > NORMAL_SPEED_TOL {
        return Err(AnalyticError::NotInSurfaceContact(vn));
    }
    if (friction.e_t - friction.e_o).abs() > 1e-12 * friction.e_t.max(friction.e_o) {
        return Err(AnalyticError::Anisotropic {
            e_t: friction.e_t,
            e_o: friction.e_o,
        });
    }
    let p_n = -frame.n.dot(applied);
    if !(p_n > 0.0) {
        return Err(AnalyticError::NoNormalLoad(-p_n));
    }

    // Tangential momentum the contact has to act against.
    let s_t = mass * frame.t.dot(velocity) + frame.t.dot(applied);
    let s_o = mass * frame.o.dot(velocity) + frame.o.dot(applied);
    let s = s_t.hypot(s_o);
    let e = friction.e_t;
    let limit = friction.mu * p_n * e;
    if s == 0.0 || s <= limit {
        return Err(AnalyticError::Sticking { step: index });
    }
    let p_t = -limit * s_t / s;
    let p_o = -limit * s_o / s;
    let tangential = frame.t * (s_t + p_t) + frame.o * (s_o + p_o);
    Ok(TranslationStep {
        velocity: tangential / *mass,
        p_t,
        p_o,
        p_r: 0.0,
        p_n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationSample {
    pub position: Vector3<f64>,
    pub step: TranslationStep,
}

/// Iterates [`pure_translation_step`] from `position`, integrating with the
/// end-of-step velocity. The applied impulse is the same every step.
pub fn translation_trajectory(
    input: &TranslationStepInput,
    position: Vector3<f64>,
    h: f64,
    steps: usize,
) -> Result<Vec<TranslationSample>, AnalyticError> {
    let mut out = Vec::with_capacity(steps);
    let mut current = input.clone();
    let mut q = position;
    for index in 0..steps {
        let step = step_at(&current, index)?;
        q += step.velocity * h;
        current.velocity = step.velocity;
        out.push(TranslationSample { position: q, step });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table(v: Vector3<f64>, mu: f64) -> TranslationStepInput {
        TranslationStepInput {
            mass: 5.0,
            frame: ContactFrame::from_normal(Vector3::z()),
            velocity: v,
            applied: Vector3::new(0.0, 0.0, -0.49),
            friction: FrictionParams::isotropic(mu),
        }
    }

    #[test]
    fn first_step_of_sliding_table() {
        let r = pure_translation_step(&table(Vector3::new(4.0, 3.0, 0.0), 0.12)).unwrap();
        assert_relative_eq!(r.p_n, 0.49, epsilon = 1e-15);
        assert_relative_eq!(r.p_t, -0.04704, epsilon = 1e-15);
        assert_relative_eq!(r.p_o, -0.03528, epsilon = 1e-15);
        assert_eq!(r.p_r, 0.0);
        assert_relative_eq!(
            r.velocity,
            Vector3::new(3.990592, 2.992944, 0.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn one_dimensional_slip() {
        let r = pure_translation_step(&table(Vector3::new(2.0, 0.0, 0.0), 0.3)).unwrap();
        assert_eq!(r.p_o, 0.0);
        assert_relative_eq!(r.p_t, -0.3 * 0.49, epsilon = 1e-15);
    }

    #[test]
    fn resting_body_is_sticking() {
        let e = pure_translation_step(&table(Vector3::zeros(), 0.12)).unwrap_err();
        assert_eq!(e, AnalyticError::Sticking { step: 0 });
    }

    #[test]
    fn preconditions() {
        let mut i = table(Vector3::new(1.0, 0.0, 0.1), 0.1);
        assert!(matches!(
            pure_translation_step(&i),
            Err(AnalyticError::NotInSurfaceContact(_))
        ));
        i.velocity.z = 0.0;
        i.friction = FrictionParams::new(1.0, 2.0, 1.0, 0.1).unwrap();
        assert!(matches!(
            pure_translation_step(&i),
            Err(AnalyticError::Anisotropic { .. })
        ));
        i.friction = FrictionParams::isotropic(0.1);
        i.applied.z = 0.2;
        assert!(matches!(
            pure_translation_step(&i),
            Err(AnalyticError::NoNormalLoad(_))
        ));
    }

    #[test]
    fn trajectory_advances_with_end_velocity() {
        let input = table(Vector3::new(4.0, 3.0, 0.0), 0.12);
        let t = translation_trajectory(&input, Vector3::zeros(), 0.01, 1).unwrap();
        assert_relative_eq!(
            t[0].position,
            Vector3::new(0.03990592, 0.02992944, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn frictionless_motion_is_uniform() {
        let input = table(Vector3::new(1.0, -2.0, 0.0), 0.0);
        let t = translation_trajectory(&input, Vector3::zeros(), 0.1, 10).unwrap();
        assert_relative_eq!(t[9].position, Vector3::new(1.0, -2.0, 0.0), epsilon = 1e-12);
        assert_eq!(t[9].step.velocity, input.velocity);
    }

    #[test]
    fn slides_until_it_sticks() {
        let input = table(Vector3::new(0.3, 0.4, 0.0), 0.12);
        let err = translation_trajectory(&input, Vector3::zeros(), 0.01, 1000).unwrap_err();
        // 0.01176 m/s lost per step from 0.5 m/s: step 41 is the last slip.
        assert_eq!(err, AnalyticError::Sticking { step: 42 });
        let t = translation_trajectory(&input, Vector3::zeros(), 0.01, 42).unwrap();
        let speeds: Vec<f64> = t.iter().map(|s| s.step.velocity.norm()).collect();
        assert!(speeds.windows(2).all(|w| w[1] < w[0]));
    }
}
