//! Shared constructors for unit tests.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::math::Quat;
use crate::scene::GaussianScene;

/// Camera at the origin looking down +z with the given resolution.
pub fn axis_camera(width: usize, height: usize, f: f64) -> CameraModel {
    CameraModel::new(
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        Matrix3::identity(),
        Vector3::zeros(),
        width,
        height,
    )
    .unwrap()
}

/// Random scene in front of the axis camera: centers in a box around z≈2,
/// moderate opacities, anisotropic scales.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let mut centers = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    let mut log_scales = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut opacity = Vec::with_capacity(n);
    let mut bg = Vec::with_capacity(n);
    for _ in 0..n {
        centers.push(Vector3::new(
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.35..0.35),
            rng.gen_range(1.5..2.5),
        ));
        rotations.push(Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        log_scales.push(Vector3::new(
            rng.gen_range(-3.4..-2.2),
            rng.gen_range(-3.4..-2.2),
            rng.gen_range(-3.4..-2.2),
        ));
        colors.push(Vector3::new(rng.gen(), rng.gen(), rng.gen()));
        opacity.push(rng.gen_range(-1.5..2.0));
        bg.push(rng.gen_range(-2.0..2.0));
    }
    GaussianScene::new(centers, rotations, log_scales, colors, opacity, bg).unwrap()
}
