//! Quaternion algebra and the small scalar helpers used everywhere else.
//!
//! Quaternions are stored unnormalized as (w, x, y, z) and normalized on use.
//! All rotation gradients are taken with respect to the *stored* (raw)
//! components, chaining through the normalization.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// d sigmoid(x) / dx expressed via the already-computed sigmoid value.
#[inline]
pub fn sigmoid_grad_from_value(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Quaternion in (w, x, y, z) order, Hamilton convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Quat::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Rotation of `angle` radians about `axis` (axis need not be unit).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let u = axis / n;
        Quat::new(c, s * u.x, s * u.y, s * u.z)
    }

    #[inline]
    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Conjugate; equals the inverse for unit quaternions.
    #[inline]
    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    #[inline]
    pub fn scaled(&self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Hamilton product self ⊗ other.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    #[inline]
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector4<f64>) -> Quat {
        Quat::new(v.x, v.y, v.z, v.w)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Matrix M such that M q = q ⊗ p for fixed p (right multiplication).
pub fn right_mul_matrix(p: &Quat) -> Matrix4<f64> {
    Matrix4::new(
        p.w, -p.x, -p.y, -p.z, //
        p.x, p.w, p.z, -p.y, //
        p.y, -p.z, p.w, p.x, //
        p.z, p.y, -p.x, p.w, //
    )
}

/// Rotation matrix of an already-normalized quaternion.
pub fn rotmat_of_unit(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix from a possibly-unnormalized quaternion.
///
/// Normalizes internally; a zero-norm quaternion is rejected.
pub fn quat_to_rotmat(q: &Quat) -> Result<Matrix3<f64>> {
    if !q.is_finite() {
        return Err(Error::invalid_parameter("non-finite quaternion"));
    }
    let n = q.norm();
    if n <= 0.0 {
        return Err(Error::invalid_parameter("zero-norm quaternion"));
    }
    Ok(rotmat_of_unit(&q.scaled(1.0 / n)))
}

/// Partial derivatives of `rotmat_of_unit` with respect to the four unit
/// quaternion components, evaluated at unit q. Order: [w, x, y, z].
pub fn rotmat_grads_of_unit(q: &Quat) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Jacobian of q̂ = q/‖q‖ with respect to the raw components:
/// (I − q̂ q̂ᵀ)/‖q‖.
pub fn normalization_jacobian(q: &Quat) -> Matrix4<f64> {
    let n = q.norm();
    let u = q.normalized().as_vector();
    (Matrix4::identity() - u * u.transpose()) / n
}

/// Chain dL/dR (at R = rotmat_of_unit(q̂)) back to the raw quaternion.
pub fn backprop_rotmat_to_quat(d_rotmat: &Matrix3<f64>, q_raw: &Quat) -> Vector4<f64> {
    let q_hat = q_raw.normalized();
    let grads = rotmat_grads_of_unit(&q_hat);
    let d_unit = Vector4::new(
        d_rotmat.component_mul(&grads[0]).sum(),
        d_rotmat.component_mul(&grads[1]).sum(),
        d_rotmat.component_mul(&grads[2]).sum(),
        d_rotmat.component_mul(&grads[3]).sum(),
    );
    normalization_jacobian(q_raw).transpose() * d_unit
}

/// Chain dL/dq̂ (gradient w.r.t. the normalized components) back to the raw
/// quaternion.
pub fn backprop_unit_to_raw(d_unit: &Vector4<f64>, q_raw: &Quat) -> Vector4<f64> {
    normalization_jacobian(q_raw).transpose() * d_unit
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_quat(rng: &mut StdRng) -> Quat {
        Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rotmat(&Quat::identity()).unwrap();
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let a = std::f64::consts::FRAC_PI_4;
        let q = Quat::new(a.cos(), 0.0, 0.0, a.sin());
        let r = quat_to_rotmat(&q).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expected, epsilon = 1e-12);
    }

    #[test]
    fn double_cover_symmetry() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            if q.norm() < 1e-3 {
                continue;
            }
            let r1 = quat_to_rotmat(&q).unwrap();
            let r2 = quat_to_rotmat(&q.scaled(-1.0)).unwrap();
            assert_relative_eq!(r1, r2, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(quat_to_rotmat(&Quat::new(0.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            if q.norm() < 1e-3 {
                continue;
            }
            let r = quat_to_rotmat(&q).unwrap();
            assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hamilton_product_matches_rotation_composition() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_quat(&mut rng).normalized();
            let b = random_quat(&mut rng).normalized();
            let r_ab = quat_to_rotmat(&a.mul(&b)).unwrap();
            let r_a = quat_to_rotmat(&a).unwrap();
            let r_b = quat_to_rotmat(&b).unwrap();
            assert_relative_eq!(r_ab, r_a * r_b, epsilon = 1e-12);
        }
    }

    #[test]
    fn right_mul_matrix_matches_product() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let p = random_quat(&mut rng);
            let direct = q.mul(&p).as_vector();
            let via_matrix = right_mul_matrix(&p) * q.as_vector();
            assert_relative_eq!(direct, via_matrix, epsilon = 1e-14);
        }
    }

    #[test]
    fn rotmat_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(19);
        let h = 1e-6;
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            if q.norm() < 0.2 {
                continue;
            }
            // Random adjoint matrix; compare full chained gradient.
            let g = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let analytic = backprop_rotmat_to_quat(&g, &q);
            let mut comps = [q.w, q.x, q.y, q.z];
            for k in 0..4 {
                let orig = comps[k];
                comps[k] = orig + h;
                let rp = quat_to_rotmat(&Quat::new(comps[0], comps[1], comps[2], comps[3])).unwrap();
                comps[k] = orig - h;
                let rm = quat_to_rotmat(&Quat::new(comps[0], comps[1], comps[2], comps[3])).unwrap();
                comps[k] = orig;
                let numeric = ((rp - rm) / (2.0 * h)).component_mul(&g).sum();
                assert_relative_eq!(analytic[k], numeric, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }
}
