//! Axis-angle rotations and their derivatives.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Below this angle the closed form is replaced by its second-order Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Angle below which the Jacobian switches to its series form.
const SMALL_ANGLE_JACOBIAN: f64 = 1e-6;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix `exp([r]x)` for an axis-angle vector `r`.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !axis_angle.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "axis-angle {axis_angle:?} is not finite"
        )));
    }
    Ok(rodrigues_unchecked(axis_angle))
}

pub(crate) fn rodrigues_unchecked(r: &Vector3<f64>) -> Matrix3<f64> {
    let angle = r.norm();
    let k = skew(r);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let k = k / angle;
    Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * k * k
}

/// Partial derivatives `dR/dr_i` of [`rodrigues`], one matrix per axis-angle coordinate.
pub fn rodrigues_jacobian(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let angle2 = r.norm_squared();
    let mut out = [Matrix3::zeros(); 3];
    if angle2.sqrt() < SMALL_ANGLE_JACOBIAN {
        let k = skew(r);
        for (i, d) in out.iter_mut().enumerate() {
            let e = skew(&Vector3::ith(i, 1.0));
            *d = e + 0.5 * (e * k + k * e);
        }
        return out;
    }
    // dR/dr_i = (r_i [r]x + [r x (I - R) e_i]x) R / |r|^2
    let rot = rodrigues_unchecked(r);
    let k = skew(r);
    let i_minus_r = Matrix3::identity() - rot;
    for (i, d) in out.iter_mut().enumerate() {
        let col = i_minus_r.column(i).into_owned();
        let m = r[i] * k + skew(&r.cross(&col));
        *d = m * rot / angle2;
    }
    out
}

/// Inverse of [`rodrigues`]: the axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn rotation_log(rot: &Matrix3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_matrix(rot).scaled_axis()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_is_identity() {
        assert_eq!(rodrigues(&Vector3::zeros()).unwrap(), Matrix3::identity());
    }

    #[test]
    fn half_turn_about_x() {
        let r = rodrigues(&Vector3::new(PI, 0.0, 0.0)).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!((r - expected).amax() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(rodrigues(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(rodrigues(&Vector3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let h = 1e-6;
        for r in [
            Vector3::new(0.3, -0.7, 1.1),
            Vector3::new(2.9, 0.1, -0.2),
            Vector3::new(1e-9, -2e-9, 0.0),
            Vector3::zeros(),
        ] {
            let jac = rodrigues_jacobian(&r);
            for i in 0..3 {
                let e = Vector3::ith(i, h);
                let fd =
                    (rodrigues_unchecked(&(r + e)) - rodrigues_unchecked(&(r - e))) / (2.0 * h);
                assert!((fd - jac[i]).amax() < 1e-8, "r={r:?} i={i}");
            }
        }
    }

    #[test]
    fn log_inverts_rodrigues() {
        let r = Vector3::new(0.4, -1.2, 0.9);
        let back = rotation_log(&rodrigues(&r).unwrap());
        assert!((back - r).amax() < 1e-12);
    }
}
