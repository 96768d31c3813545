//! Rotation-group helpers: exponential and logarithm maps between axis-angle
//! vectors and rotation matrices, and the weighted geodesic (Karcher) mean.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle `so3_exp` switches to the second-order series.
const EXP_SERIES_ANGLE: f64 = 1e-8;
/// Below this angle `so3_log` uses the small-angle series.
const LOG_SERIES_ANGLE: f64 = 1e-6;
/// Above `PI - LOG_PI_BRANCH` the axis is read from the symmetric part.
const LOG_PI_BRANCH: f64 = 1e-3;
const ORTHONORMAL_TOL: f64 = 1e-6;

const GEODESIC_STEP_TOL: f64 = 1e-10;
const GEODESIC_MAX_ITERS: usize = 100;
const GEODESIC_RESIDUAL_TOL: f64 = 1e-8;

#[rustfmt::skip]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -w.z,  w.y,
         w.z,  0.0, -w.x,
        -w.y,  w.x,  0.0,
    )
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`.
pub fn vee_antisym(m: &Mat3) -> Vec3 {
    Vec3::new(m.m32 - m.m23, m.m13 - m.m31, m.m21 - m.m12) * 0.5
}

/// Exponential map, no input validation.
pub(crate) fn exp_map(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let w = hat(omega);
    let w2 = w * w;
    let theta = theta2.sqrt();
    if theta < EXP_SERIES_ANGLE {
        Mat3::identity() + w + w2 * 0.5
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        Mat3::identity() + w * a + w2 * b
    }
}

/// Rodrigues exponential from an axis-angle vector to a rotation matrix.
pub fn so3_exp(omega: &Vec3) -> Result<Mat3> {
    if !omega.iter().all(|v| v.is_finite()) {
        return Err(invalid("so3_exp: non-finite axis-angle component"));
    }
    Ok(exp_map(omega))
}

/// Rotation angle in `[0, pi]`, computed with `atan2` so it stays accurate
/// near both `0` and `pi`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = vee_antisym(r).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Logarithm map, no validation. Returns the canonical representative with
/// angle in `[0, pi]`.
pub(crate) fn log_map(r: &Mat3) -> Vec3 {
    let v = vee_antisym(r);
    let s = v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);

    if theta < LOG_SERIES_ANGLE {
        // theta / sin(theta) = 1 + theta^2 / 6 + O(theta^4)
        return v * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - LOG_PI_BRANCH {
        return v * (theta / s);
    }

    // Near pi: R + R^T = 2 cos(theta) I + 2 (1 - cos(theta)) n n^T.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * c;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vec3 = sym.column(k).into_owned();
    let n = axis.norm();
    if n > 0.0 {
        axis /= n;
    }
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    if s < 1e-12 {
        axis = canonical_half_turn_axis(axis);
    }
    axis * theta
}

/// At exactly pi both `n` and `-n` describe the same rotation; keep the one
/// whose leading nonzero component is positive.
fn canonical_half_turn_axis(axis: Vec3) -> Vec3 {
    for i in 0..3 {
        if axis[i].abs() > 1e-12 {
            return if axis[i] < 0.0 { -axis } else { axis };
        }
    }
    axis
}

pub fn check_rotation(r: &Mat3, tol: f64) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(invalid("rotation matrix has non-finite entries"));
    }
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > tol {
        return Err(invalid(format!(
            "matrix is not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(invalid(format!("rotation determinant {det} != 1")));
    }
    Ok(())
}

/// Logarithm map from a rotation matrix to its canonical axis-angle vector.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    check_rotation(r, ORTHONORMAL_TOL)?;
    Ok(log_map(r))
}

/// Wraps an axis-angle vector onto the canonical branch `|omega| <= pi`.
pub fn canonicalize(omega: &Vec3) -> Vec3 {
    if omega.norm() <= std::f64::consts::PI {
        *omega
    } else {
        log_map(&exp_map(omega))
    }
}

/// First-order optimality residual `|sum_i w_i Log(R^T R_i)|` of a candidate mean.
pub fn geodesic_residual(mean: &Mat3, rotations: &[Mat3], weights: &[f64]) -> f64 {
    let rt = mean.transpose();
    rotations
        .iter()
        .zip(weights)
        .fold(Vec3::zeros(), |acc, (ri, &wi)| acc + log_map(&(rt * ri)) * wi)
        .norm()
}

/// Weighted geodesic mean on SO(3) via the fixed-point iteration
/// `R <- R Exp(sum_i w_i Log(R^T R_i))`, started at the heaviest rotation.
pub fn geodesic_mean(rotations: &[Mat3], weights: &[f64]) -> Result<Mat3> {
    if rotations.is_empty() {
        return Err(invalid("geodesic_mean: empty rotation set"));
    }
    if rotations.len() != weights.len() {
        return Err(invalid(format!(
            "geodesic_mean: {} rotations but {} weights",
            rotations.len(),
            weights.len()
        )));
    }
    let start = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best });
    let mut mean = rotations[start];
    if rotations.len() == 1 {
        return Ok(mean);
    }

    for _ in 0..GEODESIC_MAX_ITERS {
        let rt = mean.transpose();
        let step = rotations
            .iter()
            .zip(weights)
            .fold(Vec3::zeros(), |acc, (ri, &wi)| acc + log_map(&(rt * ri)) * wi);
        mean *= exp_map(&step);
        if step.norm() < GEODESIC_STEP_TOL {
            break;
        }
    }
    let residual = geodesic_residual(&mean, rotations, weights);
    if residual >= GEODESIC_RESIDUAL_TOL {
        return Err(Error::Convergence {
            iterations: GEODESIC_MAX_ITERS,
            residual,
        });
    }
    Ok(mean)
}
