//! Brute-force geometric oracle.
//!
//! Closest points by alternating Euclidean projections between two convex
//! bodies, and a sampled lower bound on penetration depth. Nothing here
//! touches the complementarity machinery it is used to check.

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::geom::{Aabb, ConvexBody, Pose};

/// Iteration cap for projecting onto an intersection of surfaces.
pub const PROJECTION_MAX_ITERATIONS: usize = 500;
/// Convergence threshold for projecting onto an intersection of surfaces.
pub const PROJECTION_TOL: f64 = 1e-9;
/// Grid points per axis used to seed closest-point searches.
pub const SEED_GRID: usize = 5;
/// Seeds kept after scoring the grid.
pub const SEEDS_KEPT: usize = 3;
/// Default nested-grid level for penetration sampling (`2^level + 1` per axis).
pub const DEFAULT_SAMPLE_LEVEL: u32 = 4;

const MAX_ALTERNATIONS: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("alternating projections did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("at least one body must be bounded")]
    Unbounded,
}

/// Closest points between two convex bodies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosestPointResult {
    /// Point on body A.
    pub a1: Point3<f64>,
    /// Point on body B.
    pub a2: Point3<f64>,
    pub distance: f64,
    pub penetration_depth: f64,
}

/// Euclidean projection onto a convex body by Dykstra's cyclic projections
/// over its surfaces. Exact for single-surface bodies.
pub fn project_onto_body(body: &ConvexBody, object_pose: &Pose, x: &Point3<f64>) -> Point3<f64> {
    let pose = body.world_pose(object_pose);
    let local = pose.inverse_transform_point(x);
    pose * project_local(body, &local)
}

fn project_local(body: &ConvexBody, x: &Point3<f64>) -> Point3<f64> {
    let surfaces = &body.surfaces;
    if surfaces.len() == 1 {
        return surfaces[0].project_local(x);
    }
    let mut current = *x;
    let mut increments = vec![Vector3::zeros(); surfaces.len()];
    for _ in 0..PROJECTION_MAX_ITERATIONS {
        let mut change = 0.0f64;
        for (surface, inc) in surfaces.iter().zip(increments.iter_mut()) {
            let shifted = current + *inc;
            let projected = surface.project_local(&shifted);
            *inc = shifted - projected;
            change = change.max((projected - current).norm());
            current = projected;
        }
        if change <= PROJECTION_TOL {
            break;
        }
    }
    current
}

fn alternate(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    seed: Point3<f64>,
    tol: f64,
) -> Result<(Point3<f64>, Point3<f64>), OracleError> {
    let mut p1 = project_onto_body(a, pose_a, &seed);
    let mut p2 = project_onto_body(b, pose_b, &p1);
    let stop = (tol * 1e-2).max(1e-13);
    // Plain alternation crawls along shallow wedges, so every round also
    // tries a doubling jump along the last move, kept only if the gap shrinks.
    let mut jump = 1.0;
    let mut gap = (p1 - p2).norm();
    for _ in 0..MAX_ALTERNATIONS {
        let mut n1 = project_onto_body(a, pose_a, &p2);
        let mut n2 = project_onto_body(b, pose_b, &n1);
        let change = (n1 - p1).norm().max((n2 - p2).norm());
        if change <= stop {
            return Ok((n1, n2));
        }
        let e1 = project_onto_body(a, pose_a, &(n1 + (n1 - p1) * jump));
        let e2 = project_onto_body(b, pose_b, &e1);
        let plain = (n1 - n2).norm();
        if (e1 - e2).norm() < plain {
            n1 = e1;
            n2 = e2;
            jump *= 2.0;
        } else {
            // Parallel faces: the iterates drift along a set of equally
            // close pairs without the gap moving.
            if change <= tol && gap - plain <= 4.0 * f64::EPSILON * (1.0 + gap) {
                return Ok((n1, n2));
            }
            jump = 1.0;
        }
        gap = (n1 - n2).norm();
        p1 = n1;
        p2 = n2;
    }
    Err(OracleError::NoConvergence(MAX_ALTERNATIONS))
}

/// Minimizes `|z1 - z2|` over `z1 in A`, `z2 in B` by alternating projections
/// from the best few points of a coarse grid over the bounded body (or both).
pub fn closest_points_bruteforce(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    tol: f64,
) -> Result<ClosestPointResult, OracleError> {
    if a.is_environment() && b.is_environment() {
        return Err(OracleError::Unbounded);
    }
    if a.is_environment() {
        let r = closest_points_bruteforce(b, pose_b, a, pose_a, tol)?;
        return Ok(ClosestPointResult {
            a1: r.a2,
            a2: r.a1,
            ..r
        });
    }

    let mut seeds: Vec<(f64, Point3<f64>)> = Vec::new();
    let bounds_a = a.world_bounds(pose_a).expect("bounded");
    for g in bounds_a.grid(SEED_GRID) {
        let p1 = project_onto_body(a, pose_a, &g);
        let p2 = project_onto_body(b, pose_b, &p1);
        seeds.push(((p1 - p2).norm(), p1));
    }
    if let Some(bounds_b) = b.world_bounds(pose_b) {
        for g in bounds_b.grid(SEED_GRID) {
            let p2 = project_onto_body(b, pose_b, &g);
            let p1 = project_onto_body(a, pose_a, &p2);
            seeds.push(((p1 - p2).norm(), p2));
        }
    }
    seeds.sort_by(|x, y| x.0.total_cmp(&y.0));
    seeds.truncate(SEEDS_KEPT);

    let mut best: Option<(f64, Point3<f64>, Point3<f64>)> = None;
    let mut last_err = None;
    for (_, seed) in seeds {
        match alternate(a, pose_a, b, pose_b, seed, tol) {
            Ok((p1, p2)) => {
                let d = (p1 - p2).norm();
                if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                    best = Some((d, p1, p2));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((distance, a1, a2)) = best else {
        return Err(last_err.unwrap_or(OracleError::NoConvergence(0)));
    };
    if distance > tol {
        return Ok(ClosestPointResult {
            a1,
            a2,
            distance,
            penetration_depth: 0.0,
        });
    }
    let depth = penetration_depth(a, pose_a, b, pose_b, tol);
    Ok(ClosestPointResult {
        a1,
        a2,
        distance: if depth > 0.0 { 0.0 } else { distance },
        penetration_depth: depth,
    })
}

/// Points of a bounded body: a `2^level + 1` grid over its bounding box,
/// each projected onto the body. Levels nest, so a higher level is a superset.
pub fn body_samples(body: &ConvexBody, object_pose: &Pose, level: u32) -> Vec<Point3<f64>> {
    let Some(bounds) = body.world_bounds(object_pose) else {
        return Vec::new();
    };
    bounds
        .grid((1usize << level) + 1)
        .into_iter()
        .map(|g| project_onto_body(body, object_pose, &g))
        .collect()
}

/// Points of any body (bounded or not) near `center`, from a grid over the
/// cube of half-width `radius`.
pub fn body_samples_near(
    body: &ConvexBody,
    object_pose: &Pose,
    center: &Point3<f64>,
    radius: f64,
    level: u32,
) -> Vec<Point3<f64>> {
    let r = Vector3::repeat(radius);
    Aabb::new(center - r, center + r)
        .grid((1usize << level) + 1)
        .into_iter()
        .map(|g| project_onto_body(body, object_pose, &g))
        .collect()
}

/// Sampled lower bound on how deep one body reaches into the other, with the
/// default sample density. Zero for disjoint interiors.
pub fn penetration_depth(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    tol: f64,
) -> f64 {
    penetration_depth_sampled(a, pose_a, b, pose_b, tol, DEFAULT_SAMPLE_LEVEL)
}

/// As [`penetration_depth`] with an explicit grid level; monotone in `level`.
pub fn penetration_depth_sampled(
    a: &ConvexBody,
    pose_a: &Pose,
    b: &ConvexBody,
    pose_b: &Pose,
    tol: f64,
    level: u32,
) -> f64 {
    if a.is_environment() {
        if b.is_environment() {
            return 0.0;
        }
        return penetration_depth_sampled(b, pose_b, a, pose_a, tol, level);
    }
    // Depth is measured in meters; `tol` only suppresses round-off noise.
    let depth = body_samples(a, pose_a, level)
        .iter()
        .map(|x| -b.max_signed_distance(x, pose_b))
        .fold(0.0f64, f64::max);
    if depth <= tol * 1e-3 {
        0.0
    } else {
        depth
    }
}
