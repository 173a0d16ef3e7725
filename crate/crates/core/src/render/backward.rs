//! Analytic backward pass through the rasterizer: gradients of a scalar loss
//! on the rendered channels with respect to every Gaussian parameter.
//!
//! Uses back-to-front replay per pixel with the stored final transmittance,
//! so memory stays proportional to the number of composited contributors.
//! Tile results are merged in fixed tile order; runs are bit-deterministic
//! for any worker count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::Serialize;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::math::{backprop_rotmat_to_quat, sigmoid_grad_from_value};
use crate::render::forward::{rasterize, RasterConfig, RenderOutput};
use crate::render::loss::image_loss;
use crate::scene::GaussianScene;

/// Gradients with respect to the scene parameters (raw storage) and the
/// per-camera color calibration.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub d_centers: Vec<Vector3<f64>>,
    /// Quaternion gradients in (w, x, y, z) order.
    pub d_rotations: Vec<Vector4<f64>>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_colors: Vec<Vector3<f64>>,
    pub d_opacity_logits: Vec<f64>,
    pub d_bg_logits: Vec<f64>,
    pub d_color_scale: [f64; 3],
    pub d_color_offset: [f64; 3],
    /// Norm of the accumulated 2D positional gradient per Gaussian
    /// (densification statistic).
    pub mean2d_grad_norm: Vec<f64>,
    /// Whether the Gaussian contributed to any composited pixel.
    pub touched: Vec<bool>,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        ParamGradients {
            d_centers: vec![Vector3::zeros(); n],
            d_rotations: vec![Vector4::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_colors: vec![Vector3::zeros(); n],
            d_opacity_logits: vec![0.0; n],
            d_bg_logits: vec![0.0; n],
            d_color_scale: [0.0; 3],
            d_color_offset: [0.0; 3],
            mean2d_grad_norm: vec![0.0; n],
            touched: vec![false; n],
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradients, s: f64) {
        let n = self.d_centers.len();
        for i in 0..n {
            self.d_centers[i] += other.d_centers[i] * s;
            self.d_rotations[i] += other.d_rotations[i] * s;
            self.d_log_scales[i] += other.d_log_scales[i] * s;
            self.d_colors[i] += other.d_colors[i] * s;
            self.d_opacity_logits[i] += other.d_opacity_logits[i] * s;
            self.d_bg_logits[i] += other.d_bg_logits[i] * s;
            self.mean2d_grad_norm[i] += other.mean2d_grad_norm[i] * s.abs();
            self.touched[i] = self.touched[i] || other.touched[i];
        }
        for c in 0..3 {
            self.d_color_scale[c] += other.d_color_scale[c] * s;
            self.d_color_offset[c] += other.d_color_offset[c] * s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_centers.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_colors.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_opacity_logits.iter().all(|x| x.is_finite())
            && self.d_bg_logits.iter().all(|x| x.is_finite())
    }
}

/// Upstream gradients on the rendered channels. Absent channels contribute
/// nothing.
#[derive(Debug, Clone, Default)]
pub struct OutputGradients {
    pub d_color: Option<Vec<Vector3<f64>>>,
    pub d_depth: Option<Vec<f64>>,
    pub d_fg: Option<Vec<f64>>,
    pub d_alpha: Option<Vec<f64>>,
}

/// Per-splat accumulators gathered from the pixel loops.
#[derive(Clone, Copy, Default)]
struct SplatAccum {
    d_mean2d: Vector2<f64>,
    // Adjoints of the conic entries (a, b, c) with qf = a dx² + 2b dxdy + c dy².
    d_conic: (f64, f64, f64),
    d_depth: f64,
    d_color: Vector3<f64>,
    d_opacity_logit: f64,
    d_fg_prob: f64,
    touched: bool,
}

impl SplatAccum {
    fn add(&mut self, o: &SplatAccum) {
        self.d_mean2d += o.d_mean2d;
        self.d_conic.0 += o.d_conic.0;
        self.d_conic.1 += o.d_conic.1;
        self.d_conic.2 += o.d_conic.2;
        self.d_depth += o.d_depth;
        self.d_color += o.d_color;
        self.d_opacity_logit += o.d_opacity_logit;
        self.d_fg_prob += o.d_fg_prob;
        self.touched |= o.touched;
    }
}

pub fn backward_rasterize(
    scene: &GaussianScene,
    t: usize,
    camera: &CameraModel,
    render: &RenderOutput,
    grads: &OutputGradients,
) -> Result<ParamGradients> {
    if render.scene_n != scene.n() || render.timestep != t {
        return Err(Error::InconsistentState(
            "replay data does not match the scene/timestep".into(),
        ));
    }
    if render.width != camera.width || render.height != camera.height {
        return Err(Error::InconsistentState("replay data does not match the camera".into()));
    }
    let npix = render.width * render.height;
    for (name, len) in [
        ("color", grads.d_color.as_ref().map(|v| v.len())),
        ("depth", grads.d_depth.as_ref().map(|v| v.len())),
        ("fg", grads.d_fg.as_ref().map(|v| v.len())),
        ("alpha", grads.d_alpha.as_ref().map(|v| v.len())),
    ] {
        if let Some(l) = len {
            if l != npix {
                return Err(Error::invalid_parameter(format!("{name} gradient size mismatch")));
            }
        }
    }

    let cfg = &render.config;
    let max_f = 1.0 - cfg.alpha_clamp;

    // Stage 1: per-tile accumulation into slot-local buffers.
    let tile_accums: Vec<Vec<SplatAccum>> = (0..render.grid.n_tiles())
        .into_par_iter()
        .map(|tile| {
            let list = &render.tile_lists[tile];
            let mut acc = vec![SplatAccum::default(); list.len()];
            let replay = &render.replay[tile];
            let (x0, y0, x1, y1) = render.grid.tile_rect(tile);
            let mut k = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * render.width + x;
                    let contributors =
                        &replay.indices[replay.offsets[k] as usize..replay.offsets[k + 1] as usize];
                    k += 1;
                    if contributors.is_empty() {
                        continue;
                    }
                    let dc = grads.d_color.as_ref().map(|v| v[p]).unwrap_or_else(Vector3::zeros);
                    let dd = grads.d_depth.as_ref().map(|v| v[p]).unwrap_or(0.0);
                    let df = grads.d_fg.as_ref().map(|v| v[p]).unwrap_or(0.0);
                    let da = grads.d_alpha.as_ref().map(|v| v[p]).unwrap_or(0.0);

                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let t_final = render.final_transmittance[p];
                    // Rear-accumulated channel dot product, seeded with the
                    // background term of the color channel.
                    let mut rear = t_final * render.background.dot(&dc);
                    let mut t_cur = t_final;
                    for &si in contributors.iter().rev() {
                        let s = &render.splats[si as usize];
                        let dx = px - s.mean2d.x;
                        let dy = py - s.mean2d.y;
                        let qf =
                            s.conic.0 * dx * dx + 2.0 * s.conic.1 * dx * dy + s.conic.2 * dy * dy;
                        let raw = s.opacity * (-0.5 * qf).exp();
                        let f = raw.min(max_f);
                        let one_minus = 1.0 - f;
                        let t_i = t_cur / one_minus;
                        let channel_dot = s.color.dot(&dc) + s.depth * dd + s.fg_prob * df;
                        let mut d_f = t_i * channel_dot - rear / one_minus;
                        if da != 0.0 {
                            d_f += t_final / one_minus * da;
                        }
                        let w_i = f * t_i;

                        let slot = list.binary_search(&si).expect("contributor in tile list");
                        let a = &mut acc[slot];
                        a.touched = true;
                        a.d_color += dc * w_i;
                        a.d_depth += dd * w_i;
                        a.d_fg_prob += df * w_i;
                        if raw < max_f {
                            // Chain through f = sigm(o)·exp(-qf/2).
                            a.d_opacity_logit += d_f * f * (1.0 - s.opacity);
                            let d_qf = d_f * (-0.5 * f);
                            a.d_conic.0 += d_qf * dx * dx;
                            a.d_conic.1 += d_qf * 2.0 * dx * dy;
                            a.d_conic.2 += d_qf * dy * dy;
                            let gx = d_qf * -(2.0 * s.conic.0 * dx + 2.0 * s.conic.1 * dy);
                            let gy = d_qf * -(2.0 * s.conic.1 * dx + 2.0 * s.conic.2 * dy);
                            a.d_mean2d += Vector2::new(gx, gy);
                        }
                        rear += w_i * channel_dot;
                        t_cur = t_i;
                    }
                }
            }
            acc
        })
        .collect();

    // Stage 2: merge tile buffers into per-splat accumulators in tile order.
    let mut splat_accums = vec![SplatAccum::default(); render.splats.len()];
    for (tile, acc) in tile_accums.iter().enumerate() {
        for (slot, a) in acc.iter().enumerate() {
            if a.touched {
                let si = render.tile_lists[tile][slot] as usize;
                splat_accums[si].add(a);
            }
        }
    }

    // Stage 3: chain splat-level accumulators back to the scene parameters.
    let per_splat: Vec<(usize, SplatParamGrad)> = render
        .splats
        .par_iter()
        .zip(splat_accums.par_iter())
        .filter(|(_, acc)| acc.touched)
        .map(|(s, acc)| {
            let i = s.source_index;
            let grad = chain_splat_gradient(scene, t, camera, cfg, s, acc);
            (i, grad)
        })
        .collect();

    let mut out = ParamGradients::zeros(scene.n());
    for (i, g) in per_splat {
        out.d_centers[i] += g.d_center;
        out.d_rotations[i] += g.d_rotation;
        out.d_log_scales[i] += g.d_log_scale;
        out.d_colors[i] += g.d_color;
        out.d_opacity_logits[i] += g.d_opacity_logit;
        out.d_bg_logits[i] += g.d_bg_logit;
        out.mean2d_grad_norm[i] += g.mean2d_grad_norm;
        out.touched[i] = true;
    }
    Ok(out)
}

struct SplatParamGrad {
    d_center: Vector3<f64>,
    d_rotation: Vector4<f64>,
    d_log_scale: Vector3<f64>,
    d_color: Vector3<f64>,
    d_opacity_logit: f64,
    d_bg_logit: f64,
    mean2d_grad_norm: f64,
}

fn chain_splat_gradient(
    scene: &GaussianScene,
    t: usize,
    camera: &CameraModel,
    cfg: &RasterConfig,
    s: &crate::render::forward::SplattedGaussian,
    acc: &SplatAccum,
) -> SplatParamGrad {
    let i = s.source_index;
    let w_rot = camera.rotation;
    let mu_cam = s.mu_cam;
    let z = mu_cam.z;

    // Conic adjoint -> 2D covariance adjoint: d cov = -A G A for A = cov⁻¹.
    let conic = Matrix2::new(s.conic.0, s.conic.1, s.conic.1, s.conic.2);
    let g_conic = Matrix2::new(
        acc.d_conic.0,
        acc.d_conic.1 / 2.0,
        acc.d_conic.1 / 2.0,
        acc.d_conic.2,
    );
    let g_cov2d = -(conic * g_conic * conic);

    // cov2d = M Σcam Mᵀ with M = J·W; the low-pass floor is additive and
    // passes the adjoint through unchanged.
    let q = scene.rotations[t][i].normalized();
    let r = crate::math::rotmat_of_unit(&q);
    let ls = scene.log_scales[i];
    let d_eig = Vector3::new((2.0 * ls.x).exp(), (2.0 * ls.y).exp(), (2.0 * ls.z).exp());
    let cov3d = r * Matrix3::from_diagonal(&d_eig) * r.transpose();

    let j = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * mu_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * mu_cam.y / (z * z),
    );
    let m = j * w_rot;

    let g_sigma_world = m.transpose() * g_cov2d * m;
    let g_m = (g_cov2d + g_cov2d.transpose()) * m * cov3d;
    let g_j = g_m * w_rot.transpose();

    // J depends on the camera-space center.
    let fx = camera.fx;
    let fy = camera.fy;
    let z2 = z * z;
    let z3 = z2 * z;
    let dj_dx = Matrix2x3::new(0.0, 0.0, -fx / z2, 0.0, 0.0, 0.0);
    let dj_dy = Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -fy / z2);
    let dj_dz = Matrix2x3::new(
        -fx / z2,
        0.0,
        2.0 * fx * mu_cam.x / z3,
        0.0,
        -fy / z2,
        2.0 * fy * mu_cam.y / z3,
    );
    let mut d_mu_cam = Vector3::new(
        g_j.component_mul(&dj_dx).sum(),
        g_j.component_mul(&dj_dy).sum(),
        g_j.component_mul(&dj_dz).sum(),
    );

    // Projection of the center and the depth channel.
    d_mu_cam += j.transpose() * acc.d_mean2d;
    d_mu_cam.z += acc.d_depth;

    let d_center = w_rot.transpose() * d_mu_cam;

    // Σ = R D Rᵀ.
    let g3 = 0.5 * (g_sigma_world + g_sigma_world.transpose());
    let rt_g_r = r.transpose() * g3 * r;
    let d_log_scale = Vector3::new(
        rt_g_r[(0, 0)] * 2.0 * d_eig.x,
        rt_g_r[(1, 1)] * 2.0 * d_eig.y,
        rt_g_r[(2, 2)] * 2.0 * d_eig.z,
    );
    let d_r = (g3 + g3.transpose()) * r * Matrix3::from_diagonal(&d_eig);
    let d_rotation = backprop_rotmat_to_quat(&d_r, &scene.rotations[t][i]);

    let d_bg_logit = acc.d_fg_prob * sigmoid_grad_from_value(s.fg_prob);

    let _ = cfg;
    SplatParamGrad {
        d_center,
        d_rotation,
        d_log_scale,
        d_color: acc.d_color,
        d_opacity_logit: acc.d_opacity_logit,
        d_bg_logit,
        mean2d_grad_norm: acc.d_mean2d.norm(),
    }
}

// --- Photometric pipeline glue ----------------------------------------------

/// Applies the per-camera affine color calibration.
pub fn apply_color_calibration(rendered: &[Vector3<f64>], camera: &CameraModel) -> Vec<Vector3<f64>> {
    rendered
        .iter()
        .map(|c| {
            Vector3::new(
                camera.color_scale[0] * c.x + camera.color_offset[0],
                camera.color_scale[1] * c.y + camera.color_offset[1],
                camera.color_scale[2] * c.z + camera.color_offset[2],
            )
        })
        .collect()
}

/// Chains a gradient on the calibrated image back to the raw image and the
/// calibration parameters.
pub fn backprop_color_calibration(
    d_calibrated: &[Vector3<f64>],
    raw: &[Vector3<f64>],
    camera: &CameraModel,
) -> (Vec<Vector3<f64>>, [f64; 3], [f64; 3]) {
    let mut d_raw = Vec::with_capacity(raw.len());
    let mut d_scale = [0.0; 3];
    let mut d_offset = [0.0; 3];
    for (g, r) in d_calibrated.iter().zip(raw.iter()) {
        d_raw.push(Vector3::new(
            camera.color_scale[0] * g.x,
            camera.color_scale[1] * g.y,
            camera.color_scale[2] * g.z,
        ));
        for c in 0..3 {
            d_scale[c] += g[c] * r[c];
            d_offset[c] += g[c];
        }
    }
    (d_raw, d_scale, d_offset)
}

// --- Gradient check ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradcheckLoss {
    /// (1-λ)L1 + λ(1-SSIM) on the calibrated color plus an L1 foreground term.
    Photometric,
    /// Quadratic loss over color, foreground, depth and alpha channels.
    Quadratic,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub loss: GradcheckLoss,
    pub no_coverage: bool,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

struct GradcheckTargets {
    color: Vec<Vector3<f64>>,
    fg: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
}

const SEG_WEIGHT: f64 = 0.5;
const DEPTH_WEIGHT: f64 = 0.1;
const ALPHA_WEIGHT: f64 = 0.2;

fn gradcheck_targets(seed: u64, npix: usize) -> GradcheckTargets {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7a61);
    GradcheckTargets {
        color: (0..npix).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect(),
        fg: (0..npix).map(|_| rng.gen()).collect(),
        depth: (0..npix).map(|_| rng.gen_range(0.5..3.0)).collect(),
        alpha: (0..npix).map(|_| rng.gen()).collect(),
    }
}

/// Full pipeline loss used by the gradient check; returns the scalar loss and
/// (optionally) the analytic parameter gradients.
fn gradcheck_loss_and_grads(
    scene: &GaussianScene,
    camera: &CameraModel,
    cfg: &RasterConfig,
    kind: GradcheckLoss,
    targets: &GradcheckTargets,
    want_grads: bool,
) -> Result<(f64, Option<ParamGradients>, bool)> {
    let render = rasterize(scene, 0, camera, Vector3::new(0.05, 0.08, 0.1), cfg)?;
    let covered = render.alpha.iter().any(|&a| a > 0.0);
    let calibrated = apply_color_calibration(&render.color, camera);
    let npix = render.color.len();

    let (loss, d_cal, d_fg, d_depth, d_alpha) = match kind {
        GradcheckLoss::Photometric => {
            let (l_img, d_cal) =
                image_loss(&calibrated, &targets.color, render.width, render.height, 0.2)?;
            let mut l_seg = 0.0;
            let mut d_fg = vec![0.0; npix];
            let inv = 1.0 / npix as f64;
            for p in 0..npix {
                let d = render.fg[p] - targets.fg[p];
                l_seg += d.abs() * inv;
                d_fg[p] = d.signum() * inv * SEG_WEIGHT;
            }
            (l_img + SEG_WEIGHT * l_seg, d_cal, d_fg, None, None)
        }
        GradcheckLoss::Quadratic => {
            let mut loss = 0.0;
            let mut d_cal = vec![Vector3::zeros(); npix];
            let mut d_fg = vec![0.0; npix];
            let mut d_depth = vec![0.0; npix];
            let mut d_alpha = vec![0.0; npix];
            for p in 0..npix {
                let dc = calibrated[p] - targets.color[p];
                loss += 0.5 * dc.norm_squared();
                d_cal[p] = dc;
                let df = render.fg[p] - targets.fg[p];
                loss += 0.5 * SEG_WEIGHT * df * df;
                d_fg[p] = SEG_WEIGHT * df;
                let dd = render.depth[p] - targets.depth[p];
                loss += 0.5 * DEPTH_WEIGHT * dd * dd;
                d_depth[p] = DEPTH_WEIGHT * dd;
                let da = render.alpha[p] - targets.alpha[p];
                loss += 0.5 * ALPHA_WEIGHT * da * da;
                d_alpha[p] = ALPHA_WEIGHT * da;
            }
            (loss, d_cal, d_fg, Some(d_depth), Some(d_alpha))
        }
    };

    if !want_grads {
        return Ok((loss, None, covered));
    }

    let (d_raw, d_scale, d_offset) = backprop_color_calibration(&d_cal, &render.color, camera);
    let grads = OutputGradients {
        d_color: Some(d_raw),
        d_depth,
        d_fg: Some(d_fg),
        d_alpha,
    };
    let mut param_grads = backward_rasterize(scene, 0, camera, &render, &grads)?;
    param_grads.d_color_scale = d_scale;
    param_grads.d_color_offset = d_offset;
    Ok((loss, Some(param_grads), covered))
}

const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_EXCLUDE: f64 = 1e-8;

/// Compares analytic parameter gradients against central finite differences
/// on the full rendering + loss pipeline. Runs with the smooth raster profile
/// so the loss is differentiable everywhere.
pub fn gradcheck(
    scene: &GaussianScene,
    camera: &CameraModel,
    kind: GradcheckLoss,
    seed: u64,
) -> Result<GradcheckReport> {
    let cfg = RasterConfig::smooth();
    let targets = gradcheck_targets(seed, camera.pixel_count());
    let (_, grads, covered) =
        gradcheck_loss_and_grads(scene, camera, &cfg, kind, &targets, true)?;
    let grads = grads.expect("gradients requested");

    let eval = |scene: &GaussianScene, camera: &CameraModel| -> Result<f64> {
        Ok(gradcheck_loss_and_grads(scene, camera, &cfg, kind, &targets, false)?.0)
    };

    let mut groups = Vec::new();
    let mut work = scene.clone();
    let mut cam_work = camera.clone();
    let n = scene.n();

    // Scene parameter groups: perturb each scalar, central difference.
    {
        let mut run_group = |name: &str,
                             count: usize,
                             get: &dyn Fn(&GaussianScene, usize) -> f64,
                             set: &mut dyn FnMut(&mut GaussianScene, usize, f64),
                             analytic: &dyn Fn(usize) -> f64|
         -> Result<GroupReport> {
            let mut max_rel = 0.0f64;
            let mut checked = 0;
            let mut skipped = 0;
            for k in 0..count {
                let orig = get(&work, k);
                set(&mut work, k, orig + GRADCHECK_STEP);
                let lp = eval(&work, camera)?;
                set(&mut work, k, orig - GRADCHECK_STEP);
                let lm = eval(&work, camera)?;
                set(&mut work, k, orig);
                let numeric = (lp - lm) / (2.0 * GRADCHECK_STEP);
                let a = analytic(k);
                if a.abs() < GRADCHECK_EXCLUDE && numeric.abs() < GRADCHECK_EXCLUDE {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                max_rel = max_rel.max(rel);
            }
            Ok(GroupReport { name: name.into(), max_rel_err: max_rel, checked, skipped })
        };

        groups.push(run_group(
            "centers",
            n * 3,
            &|s, k| s.centers[0][k / 3][k % 3],
            &mut |s, k, v| s.centers[0][k / 3][k % 3] = v,
            &|k| grads.d_centers[k / 3][k % 3],
        )?);
        groups.push(run_group(
            "rotations",
            n * 4,
            &|s, k| {
                let q = &s.rotations[0][k / 4];
                [q.w, q.x, q.y, q.z][k % 4]
            },
            &mut |s, k, v| {
                let q = &mut s.rotations[0][k / 4];
                match k % 4 {
                    0 => q.w = v,
                    1 => q.x = v,
                    2 => q.y = v,
                    _ => q.z = v,
                }
            },
            &|k| grads.d_rotations[k / 4][k % 4],
        )?);
        groups.push(run_group(
            "log_scales",
            n * 3,
            &|s, k| s.log_scales[k / 3][k % 3],
            &mut |s, k, v| s.log_scales[k / 3][k % 3] = v,
            &|k| grads.d_log_scales[k / 3][k % 3],
        )?);
        groups.push(run_group(
            "colors",
            n * 3,
            &|s, k| s.colors[k / 3][k % 3],
            &mut |s, k, v| s.colors[k / 3][k % 3] = v,
            &|k| grads.d_colors[k / 3][k % 3],
        )?);
        groups.push(run_group(
            "opacity_logits",
            n,
            &|s, k| s.opacity_logits[k],
            &mut |s, k, v| s.opacity_logits[k] = v,
            &|k| grads.d_opacity_logits[k],
        )?);
        groups.push(run_group(
            "bg_logits",
            n,
            &|s, k| s.bg_logits[k],
            &mut |s, k, v| s.bg_logits[k] = v,
            &|k| grads.d_bg_logits[k],
        )?);
    }

    // Color calibration groups perturb the camera.
    for (name, is_scale) in [("color_scale", true), ("color_offset", false)] {
        let mut max_rel = 0.0f64;
        let mut checked = 0;
        let mut skipped = 0;
        for c in 0..3 {
            let orig = if is_scale { cam_work.color_scale[c] } else { cam_work.color_offset[c] };
            let slot = if is_scale { &mut cam_work.color_scale } else { &mut cam_work.color_offset };
            slot[c] = orig + GRADCHECK_STEP;
            let lp = eval(scene, &cam_work)?;
            let slot = if is_scale { &mut cam_work.color_scale } else { &mut cam_work.color_offset };
            slot[c] = orig - GRADCHECK_STEP;
            let lm = eval(scene, &cam_work)?;
            let slot = if is_scale { &mut cam_work.color_scale } else { &mut cam_work.color_offset };
            slot[c] = orig;
            let numeric = (lp - lm) / (2.0 * GRADCHECK_STEP);
            let a = if is_scale { grads.d_color_scale[c] } else { grads.d_color_offset[c] };
            if a.abs() < GRADCHECK_EXCLUDE && numeric.abs() < GRADCHECK_EXCLUDE {
                skipped += 1;
                continue;
            }
            checked += 1;
            max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()));
        }
        groups.push(GroupReport { name: name.into(), max_rel_err: max_rel, checked, skipped });
    }

    Ok(GradcheckReport { seed, loss: kind, no_coverage: !covered, groups })
}
