//! The dynamic Gaussian scene: per-timestep poses over static appearance
//! attributes, plus the covariance algebra and checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math::{quat_to_rotmat, sigmoid, Quat};

/// Structure-of-arrays scene of N Gaussians with `timesteps` stored poses.
///
/// Per Gaussian there are 7 scalars per timestep (center + quaternion) and 8
/// static scalars (log-scale, color, opacity logit, background logit). The
/// static attributes are stored once; every timestep shares them.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    /// `centers[t][i]`, meters.
    pub centers: Vec<Vec<Vector3<f64>>>,
    /// `rotations[t][i]`, unnormalized storage, normalized on use.
    pub rotations: Vec<Vec<Quat>>,
    /// Log of the per-axis standard deviations, log-meters.
    pub log_scales: Vec<Vector3<f64>>,
    /// RGB in [0,1].
    pub colors: Vec<Vector3<f64>>,
    /// Opacity logits; sigm() on use.
    pub opacity_logits: Vec<f64>,
    /// Background logits; sigm() gives the foreground probability.
    pub bg_logits: Vec<f64>,
}

impl GaussianScene {
    pub fn new(
        centers: Vec<Vector3<f64>>,
        rotations: Vec<Quat>,
        log_scales: Vec<Vector3<f64>>,
        colors: Vec<Vector3<f64>>,
        opacity_logits: Vec<f64>,
        bg_logits: Vec<f64>,
    ) -> Result<Self> {
        let n = centers.len();
        if [rotations.len(), log_scales.len(), colors.len(), opacity_logits.len(), bg_logits.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::invalid_parameter("attribute arrays disagree on count"));
        }
        Ok(GaussianScene {
            centers: vec![centers],
            rotations: vec![rotations],
            log_scales,
            colors,
            opacity_logits,
            bg_logits,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.log_scales.len()
    }

    #[inline]
    pub fn timesteps(&self) -> usize {
        self.centers.len()
    }

    pub fn has_timestep(&self, t: usize) -> bool {
        t < self.timesteps()
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    #[inline]
    pub fn fg_prob(&self, i: usize) -> f64 {
        sigmoid(self.bg_logits[i])
    }

    /// Appends poses for a new timestep. Lengths must match the scene count.
    pub fn push_timestep(&mut self, centers: Vec<Vector3<f64>>, rotations: Vec<Quat>) -> Result<()> {
        if centers.len() != self.n() || rotations.len() != self.n() {
            return Err(Error::invalid_parameter("timestep pose arrays disagree on count"));
        }
        self.centers.push(centers);
        self.rotations.push(rotations);
        Ok(())
    }

    fn check_index(&self, t: usize, i: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::index(format!("timestep {t} of {}", self.timesteps())));
        }
        if i >= self.n() {
            return Err(Error::index(format!("gaussian {i} of {}", self.n())));
        }
        Ok(())
    }

    /// Opacity-weighted unnormalized Gaussian density of Gaussian `i` at the
    /// 3D point `p`, in [0, 1).
    pub fn influence_3d(&self, t: usize, i: usize, p: &Vector3<f64>) -> Result<f64> {
        self.check_index(t, i)?;
        let r = quat_to_rotmat(&self.rotations[t][i])?;
        let d = p - self.centers[t][i];
        // Σ⁻¹ = R diag(exp(-2 log_s)) Rᵀ applied to the offset.
        let local = r.transpose() * d;
        let ls = self.log_scales[i];
        let q = local.x * local.x * (-2.0 * ls.x).exp()
            + local.y * local.y * (-2.0 * ls.y).exp()
            + local.z * local.z * (-2.0 * ls.z).exp();
        Ok(self.opacity(i) * (-0.5 * q).exp())
    }

    pub fn scene_extent_at(&self, t: usize) -> f64 {
        scene_extent(&self.centers[t])
    }
}

/// Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)).
pub fn build_covariance(log_scale: &Vector3<f64>, q: &Quat) -> Result<Matrix3<f64>> {
    if !(log_scale.iter().all(|v| v.is_finite()) && q.is_finite()) {
        return Err(Error::invalid_parameter("non-finite covariance inputs"));
    }
    let r = quat_to_rotmat(q)?;
    let d = Matrix3::from_diagonal(&Vector3::new(
        (2.0 * log_scale.x).exp(),
        (2.0 * log_scale.y).exp(),
        (2.0 * log_scale.z).exp(),
    ));
    Ok(r * d * r.transpose())
}

/// Radius of the bounding sphere around the centroid of a point set.
pub fn scene_extent(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    points
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0f64, f64::max)
        .max(1e-6)
}

// --- Checkpoint format -----------------------------------------------------
//
// Binary little-endian container:
//   magic  "DG3C"      4 bytes
//   version u32        (currently 1)
//   n       u64
//   timesteps u64
//   static block, n * 8 f64:  log_scales (n*3), colors (n*3),
//                             opacity_logits (n), bg_logits (n)
//   per timestep, n * 7 f64:  centers (n*3), rotations (n*4, wxyz)
//
// Total payload is exactly n * (7*timesteps + 8) f64 scalars after the
// 24-byte header; save → load round-trips bit-exactly.

const CHECKPOINT_MAGIC: &[u8; 4] = b"DG3C";
const CHECKPOINT_VERSION: u32 = 1;

pub const CHECKPOINT_HEADER_BYTES: usize = 4 + 4 + 8 + 8;

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

impl GaussianScene {
    /// Serialized static attribute block (used for byte-level diffing).
    pub fn static_attribute_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut buf = Vec::with_capacity(n * 8 * 8);
        for v in &self.log_scales {
            push_f64(&mut buf, v.x);
            push_f64(&mut buf, v.y);
            push_f64(&mut buf, v.z);
        }
        for v in &self.colors {
            push_f64(&mut buf, v.x);
            push_f64(&mut buf, v.y);
            push_f64(&mut buf, v.z);
        }
        for &v in &self.opacity_logits {
            push_f64(&mut buf, v);
        }
        for &v in &self.bg_logits {
            push_f64(&mut buf, v);
        }
        buf
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let t = self.timesteps();
        let mut buf = Vec::with_capacity(CHECKPOINT_HEADER_BYTES + n * (7 * t + 8) * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(t as u64).to_le_bytes());
        buf.extend_from_slice(&self.static_attribute_bytes());
        for step in 0..t {
            for c in &self.centers[step] {
                push_f64(&mut buf, c.x);
                push_f64(&mut buf, c.y);
                push_f64(&mut buf, c.z);
            }
            for q in &self.rotations[step] {
                push_f64(&mut buf, q.w);
                push_f64(&mut buf, q.x);
                push_f64(&mut buf, q.y);
                push_f64(&mut buf, q.z);
            }
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a scene checkpoint (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        cursor.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut u64buf = [0u8; 8];
        cursor.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        cursor.read_exact(&mut u64buf)?;
        let t = u64::from_le_bytes(u64buf) as usize;

        let expected = CHECKPOINT_HEADER_BYTES + n * (7 * t + 8) * 8;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "checkpoint size mismatch: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let next = move |cursor: &mut std::io::Cursor<&[u8]>| -> Result<f64> {
            let mut b = [0u8; 8];
            cursor.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };

        let mut log_scales = Vec::with_capacity(n);
        for _ in 0..n {
            log_scales.push(Vector3::new(next(&mut cursor)?, next(&mut cursor)?, next(&mut cursor)?));
        }
        let mut colors = Vec::with_capacity(n);
        for _ in 0..n {
            colors.push(Vector3::new(next(&mut cursor)?, next(&mut cursor)?, next(&mut cursor)?));
        }
        let mut opacity_logits = Vec::with_capacity(n);
        for _ in 0..n {
            opacity_logits.push(next(&mut cursor)?);
        }
        let mut bg_logits = Vec::with_capacity(n);
        for _ in 0..n {
            bg_logits.push(next(&mut cursor)?);
        }
        let mut centers = Vec::with_capacity(t);
        let mut rotations = Vec::with_capacity(t);
        for _ in 0..t {
            let mut cs = Vec::with_capacity(n);
            for _ in 0..n {
                cs.push(Vector3::new(next(&mut cursor)?, next(&mut cursor)?, next(&mut cursor)?));
            }
            let mut qs = Vec::with_capacity(n);
            for _ in 0..n {
                qs.push(Quat::new(
                    next(&mut cursor)?,
                    next(&mut cursor)?,
                    next(&mut cursor)?,
                    next(&mut cursor)?,
                ));
            }
            centers.push(cs);
            rotations.push(qs);
        }
        Ok(GaussianScene { centers, rotations, log_scales, colors, opacity_logits, bg_logits })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_scene(n: usize, seed: u64) -> GaussianScene {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut centers = Vec::new();
        let mut rotations = Vec::new();
        let mut log_scales = Vec::new();
        let mut colors = Vec::new();
        let mut opacity = Vec::new();
        let mut bg = Vec::new();
        for _ in 0..n {
            centers.push(Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            rotations.push(Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            log_scales.push(Vector3::new(
                rng.gen_range(-3.0..0.0),
                rng.gen_range(-3.0..0.0),
                rng.gen_range(-3.0..0.0),
            ));
            colors.push(Vector3::new(rng.gen(), rng.gen(), rng.gen()));
            opacity.push(rng.gen_range(-2.0..2.0));
            bg.push(rng.gen_range(-2.0..2.0));
        }
        GaussianScene::new(centers, rotations, log_scales, colors, opacity, bg).unwrap()
    }

    #[test]
    fn covariance_identity() {
        let cov = build_covariance(&Vector3::zeros(), &Quat::identity()).unwrap();
        assert_relative_eq!(cov, Matrix3::identity(), epsilon = 1e-14);
    }

    #[test]
    fn covariance_axis_aligned_scaling() {
        let cov = build_covariance(&Vector3::new(2f64.ln(), 0.0, 0.0), &Quat::identity()).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert_relative_eq!(cov, expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_isotropic_is_rotation_invariant() {
        let sigma: f64 = 0.37;
        let ls = Vector3::from_element(sigma.ln());
        let q = Quat::new(0.3, -0.5, 0.7, 0.2);
        let cov = build_covariance(&ls, &q).unwrap();
        assert_relative_eq!(cov, Matrix3::identity() * sigma * sigma, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_non_finite() {
        assert!(build_covariance(&Vector3::new(f64::NAN, 0.0, 0.0), &Quat::identity()).is_err());
    }

    #[test]
    fn covariance_eigenvalues_recover_scales() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let ls = Vector3::new(
                rng.gen_range(-2.0..1.0),
                rng.gen_range(-2.0..1.0),
                rng.gen_range(-2.0..1.0),
            );
            let q = Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() < 1e-2 {
                continue;
            }
            let cov = build_covariance(&ls, &q).unwrap();
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut expected: Vec<f64> =
                ls.iter().map(|l| (2.0 * l).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (e, x) in eig.iter().zip(&expected) {
                assert_relative_eq!(e, x, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn influence_at_center_is_sigmoid_of_opacity() {
        let mut scene = toy_scene(3, 5);
        scene.opacity_logits[1] = 0.0;
        let p = scene.centers[0][1];
        let f = scene.influence_3d(0, 1, &p).unwrap();
        assert_relative_eq!(f, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn influence_matches_dense_matrix_evaluation() {
        let scene = toy_scene(8, 9);
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..30 {
            let i = rng.gen_range(0..scene.n());
            let p = Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            let f = scene.influence_3d(0, i, &p).unwrap();
            // Independent dense evaluation of the quadratic form.
            let cov = build_covariance(&scene.log_scales[i], &scene.rotations[0][i]).unwrap();
            let inv = cov.try_inverse().unwrap();
            let d = p - scene.centers[0][i];
            let expected = scene.opacity(i) * (-0.5 * (d.transpose() * inv * d).x).exp();
            assert_relative_eq!(f, expected, max_relative = 1e-9);
            assert!((0.0..1.0).contains(&f));
        }
    }

    #[test]
    fn influence_decays_to_zero_far_away() {
        let scene = toy_scene(2, 1);
        let f = scene
            .influence_3d(0, 0, &Vector3::new(1e4, 1e4, 1e4))
            .unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn influence_index_errors() {
        let scene = toy_scene(2, 1);
        assert!(scene.influence_3d(1, 0, &Vector3::zeros()).is_err());
        assert!(scene.influence_3d(0, 5, &Vector3::zeros()).is_err());
    }

    #[test]
    fn influence_is_rigid_transform_invariant() {
        let scene = toy_scene(4, 12);
        let mut rng = StdRng::seed_from_u64(77);
        let gq = Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalized();
        let gr = quat_to_rotmat(&gq).unwrap();
        let gt = Vector3::new(0.4, -0.8, 1.3);
        let mut moved = scene.clone();
        for i in 0..scene.n() {
            moved.centers[0][i] = gr * scene.centers[0][i] + gt;
            moved.rotations[0][i] = gq.mul(&scene.rotations[0][i].normalized());
        }
        for _ in 0..20 {
            let i = rng.gen_range(0..scene.n());
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let f0 = scene.influence_3d(0, i, &p).unwrap();
            let f1 = moved.influence_3d(0, i, &(gr * p + gt)).unwrap();
            assert_relative_eq!(f0, f1, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut scene = toy_scene(7, 42);
        // Add a second timestep so the per-timestep block is exercised.
        let centers1 = scene.centers[0].iter().map(|c| c + Vector3::new(0.01, 0.0, 0.0)).collect();
        let rotations1 = scene.rotations[0].clone();
        scene.push_timestep(centers1, rotations1).unwrap();

        let bytes = scene.to_checkpoint_bytes();
        assert_eq!(bytes.len(), CHECKPOINT_HEADER_BYTES + scene.n() * (7 * 2 + 8) * 8);
        let reloaded = GaussianScene::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_checkpoint_bytes(), bytes);
        assert_eq!(reloaded, scene);
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let scene = toy_scene(3, 4);
        let mut bytes = scene.to_checkpoint_bytes();
        bytes.pop();
        assert!(GaussianScene::from_checkpoint_bytes(&bytes).is_err());
    }
}
