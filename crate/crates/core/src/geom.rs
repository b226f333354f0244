//! Geometric primitives: points, vectors, and rigid-body poses.

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Tolerance for accepting a rotation matrix as orthonormal with det +1.
pub const ROTATION_TOL: f64 = 1e-6;

/// A rigid-body transform mapping sensor-frame coordinates to the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 within [`ROTATION_TOL`].
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (max deviation {err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation determinant is {det:.9}, expected +1"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Max-abs deviation of `R^T R` from the identity.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let gram = r.transpose() * r;
    (gram - Mat3::identity()).abs().max()
}

/// Projects a near-orthonormal matrix onto SO(3) via SVD (`R' = U V^T`,
/// with a sign flip if the product lands on a reflection).
pub fn reorthonormalize(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut fixed = u * v_t;
    if fixed.determinant() < 0.0 {
        let mut u_fix = u;
        u_fix.column_mut(2).neg_mut();
        fixed = u_fix * v_t;
    }
    fixed
}

pub fn point_is_finite(p: &Point3) -> bool {
    p.coords.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn yaw(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn identity_round_trip() {
        let pose = Pose::identity();
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(pose.transform_point(p), p);
    }

    #[test]
    fn rejects_reflection() {
        let reflect = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn inverse_recovers_sensor_frame() {
        let pose = Pose::new(yaw(0.7), Vec3::new(5.0, -2.0, 1.0)).unwrap();
        let p = Point3::new(3.0, 1.0, -4.0);
        let world = pose.transform_point(p);
        let back = pose.inverse().transform_point(world);
        assert_relative_eq!(back.coords, p.coords, max_relative = 1e-9);
    }

    #[test]
    fn reorthonormalize_projects_back() {
        let mut noisy = yaw(1.2);
        noisy[(0, 0)] += 5e-4;
        noisy[(2, 1)] -= 3e-4;
        let fixed = reorthonormalize(&noisy);
        assert!(orthonormality_error(&fixed) < 1e-12);
        assert_relative_eq!(fixed.determinant(), 1.0, epsilon = 1e-12);
    }
}
