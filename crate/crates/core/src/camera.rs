//! Pinhole camera with a rigid world-to-camera transform and per-channel
//! color calibration.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ORTHONORMALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation block of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation of the world-to-camera transform.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    /// Per-channel affine color calibration, applied as scale * c + offset.
    pub color_scale: [f64; 3],
    pub color_offset: [f64; 3],
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid_parameter("focal lengths must be positive"));
        }
        if width < 1 || height < 1 {
            return Err(Error::invalid_parameter("image size must be at least 1x1"));
        }
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if orth > ORTHONORMALITY_TOL {
            return Err(Error::invalid_parameter(format!(
                "extrinsic rotation not orthonormal (residual {orth:.2e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::invalid_parameter("extrinsic rotation must have det +1"));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            color_scale: [1.0; 3],
            color_offset: [0.0; 3],
        })
    }

    /// Camera placed at `eye`, looking at `target`, with `up` fixing the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of the world-to-camera rotation: camera x right, y down, z forward.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        CameraModel::new(fx, fy, cx, cy, rotation, translation, width, height)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4)
            .is_err());
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 0, 4)
            .is_err());
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let bad = Matrix3::identity() * 1.1;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, bad, Vector3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn rejects_reflection() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, refl, Vector3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let eye = Vector3::new(0.0, 0.0, -3.0);
        let cam = CameraModel::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            100.0,
            32.0,
            32.0,
            64,
            64,
        )
        .unwrap();
        // The target sits on the optical axis, 3 meters in front.
        let c = cam.world_to_camera(&Vector3::zeros());
        assert_relative_eq!(c, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
        // Round trip.
        let p = Vector3::new(0.3, -0.2, 0.9);
        assert_relative_eq!(cam.camera_to_world(&cam.world_to_camera(&p)), p, epsilon = 1e-12);
    }
}
