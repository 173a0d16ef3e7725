//! Forward differentiable rasterizer: projection, 2D splatting, tiled
//! depth-ordered alpha compositing of color / depth / foreground channels.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::scene::{build_covariance, GaussianScene};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Tile-assignment radius in sigmas; `None` disables culling entirely.
    pub cull_radius: Option<f64>,
    pub near_plane: f64,
    /// Low-pass floor added in quadrature to the 2D covariance diagonal, px.
    pub eps_pix: f64,
    /// Per-contributor influence is clamped to < 1 - alpha_clamp.
    pub alpha_clamp: f64,
    /// Contributors with 2D influence below this are skipped.
    pub f_min: f64,
    /// Compositing stops once transmittance drops below this.
    pub term_threshold: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            cull_radius: Some(3.0),
            near_plane: 0.01,
            eps_pix: 0.3,
            alpha_clamp: 1e-4,
            f_min: 1.0 / 255.0,
            term_threshold: 1e-4,
        }
    }
}

impl RasterConfig {
    /// Profile with every discrete threshold disabled, so the rendered image
    /// is a smooth function of the parameters (used by gradient checks).
    pub fn smooth() -> Self {
        RasterConfig {
            tile_size: 16,
            cull_radius: None,
            near_plane: 0.01,
            eps_pix: 0.3,
            alpha_clamp: 1e-4,
            f_min: 0.0,
            term_threshold: 0.0,
        }
    }
}

/// A Gaussian projected into one view.
#[derive(Debug, Clone)]
pub struct SplattedGaussian {
    pub source_index: usize,
    pub mean2d: Vector2<f64>,
    /// Upper triangle (xx, xy, yy) of the low-pass-floored 2D covariance.
    pub cov2d: (f64, f64, f64),
    /// Upper triangle of the inverse 2D covariance.
    pub conic: (f64, f64, f64),
    /// Camera-space z of the center, meters.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub fg_prob: f64,
    pub mu_cam: Vector3<f64>,
}

/// μ²ᴰ = K((Eμ)/(Eμ)_z); returns the pixel position and the camera depth,
/// or `None` when the center sits behind the near plane.
pub fn project_mean(
    mu: &Vector3<f64>,
    camera: &CameraModel,
    near_plane: f64,
) -> Option<(Vector2<f64>, f64)> {
    let mu_cam = camera.world_to_camera(mu);
    project_mean_cam(&mu_cam, camera, near_plane)
}

pub fn project_mean_cam(
    mu_cam: &Vector3<f64>,
    camera: &CameraModel,
    near_plane: f64,
) -> Option<(Vector2<f64>, f64)> {
    if mu_cam.z <= near_plane {
        return None;
    }
    let u = camera.fx * mu_cam.x / mu_cam.z + camera.cx;
    let v = camera.fy * mu_cam.y / mu_cam.z + camera.cy;
    Some((Vector2::new(u, v), mu_cam.z))
}

/// Jacobian of the point projection at a camera-space position:
/// [[fx/z, 0, -fx·x/z²], [0, fy/z, -fy·y/z²]].
pub fn projection_jacobian(
    mu_cam: &Vector3<f64>,
    camera: &CameraModel,
    near_plane: f64,
) -> Option<Matrix2x3<f64>> {
    if mu_cam.z <= near_plane {
        return None;
    }
    let z = mu_cam.z;
    Some(Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * mu_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * mu_cam.y / (z * z),
    ))
}

/// Σ²ᴰ = J W Σ Wᵀ Jᵀ with the low-pass floor added to the diagonal.
pub fn splat_covariance(
    cov3d: &Matrix3<f64>,
    camera: &CameraModel,
    mu_cam: &Vector3<f64>,
    near_plane: f64,
    eps_pix: f64,
) -> Option<Matrix2<f64>> {
    let j = projection_jacobian(mu_cam, camera, near_plane)?;
    let m = j * camera.rotation;
    let mut cov2d = m * cov3d * m.transpose();
    let floor = eps_pix * eps_pix;
    cov2d[(0, 0)] += floor;
    cov2d[(1, 1)] += floor;
    Some(cov2d)
}

pub fn prepare_splats(
    scene: &GaussianScene,
    t: usize,
    camera: &CameraModel,
    cfg: &RasterConfig,
) -> Result<Vec<SplattedGaussian>> {
    if !scene.has_timestep(t) {
        return Err(Error::index(format!("timestep {t} of {}", scene.timesteps())));
    }
    let splats: Vec<SplattedGaussian> = (0..scene.n())
        .into_par_iter()
        .filter_map(|i| {
            let opacity = scene.opacity(i);
            if cfg.f_min > 0.0 && opacity < cfg.f_min {
                return None;
            }
            let mu = scene.centers[t][i];
            let (mean2d, depth) = project_mean(&mu, camera, cfg.near_plane)?;
            let cov3d = build_covariance(&scene.log_scales[i], &scene.rotations[t][i]).ok()?;
            let mu_cam = camera.world_to_camera(&mu);
            let cov2d = splat_covariance(&cov3d, camera, &mu_cam, cfg.near_plane, cfg.eps_pix)?;
            let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
            let det = a * c - b * b;
            if det <= 0.0 || !det.is_finite() {
                return None;
            }
            let conic = (c / det, -b / det, a / det);
            Some(SplattedGaussian {
                source_index: i,
                mean2d,
                cov2d: (a, b, c),
                conic,
                depth,
                opacity,
                color: scene.colors[i],
                fg_prob: scene.fg_prob(i),
                mu_cam,
            })
        })
        .collect();
    Ok(splats)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile_size: usize) -> Self {
        let ts = tile_size.max(1);
        TileGrid {
            width,
            height,
            tile_size: ts,
            tiles_x: width.div_ceil(ts),
            tiles_y: height.div_ceil(ts),
        }
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rectangle of a tile: (x0, y0, x1, y1), exclusive upper bounds.
    pub fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(self.width), (y0 + self.tile_size).min(self.height))
    }
}

/// Sorts splats by ascending center depth (ties by ascending source index)
/// and assigns each to every tile its bounding box intersects.
///
/// The per-splat box radius is never taken below the radius at which the
/// influence decays to the skip threshold, so tiling never drops a
/// contributor that the per-pixel skip test would keep. With `cull_radius`
/// of `None` (or a zero skip threshold) every splat lands in every tile.
pub fn depth_sort_and_cull(
    splats: &mut [SplattedGaussian],
    grid: &TileGrid,
    cull_radius: Option<f64>,
    f_min: f64,
) -> Vec<Vec<u32>> {
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| a.source_index.cmp(&b.source_index))
    });
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); grid.n_tiles()];
    for (si, s) in splats.iter().enumerate() {
        let radius = match (cull_radius, f_min > 0.0) {
            (Some(r), true) => {
                let r_skip = (2.0 * (s.opacity / f_min).ln()).max(0.0).sqrt();
                Some(r.max(r_skip))
            }
            _ => None,
        };
        let (tx0, tx1, ty0, ty1) = match radius {
            None => (0, grid.tiles_x - 1, 0, grid.tiles_y - 1),
            Some(r) => {
                let ext_x = r * s.cov2d.0.max(0.0).sqrt();
                let ext_y = r * s.cov2d.2.max(0.0).sqrt();
                let x0 = s.mean2d.x - ext_x - 1.0;
                let x1 = s.mean2d.x + ext_x + 1.0;
                let y0 = s.mean2d.y - ext_y - 1.0;
                let y1 = s.mean2d.y + ext_y + 1.0;
                if x1 < 0.0 || y1 < 0.0 || x0 >= grid.width as f64 || y0 >= grid.height as f64 {
                    continue;
                }
                let px0 = x0.max(0.0) as usize;
                let px1 = (x1.max(0.0) as usize).min(grid.width - 1);
                let py0 = y0.max(0.0) as usize;
                let py1 = (y1.max(0.0) as usize).min(grid.height - 1);
                (px0 / grid.tile_size, px1 / grid.tile_size, py0 / grid.tile_size, py1 / grid.tile_size)
            }
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_lists[ty * grid.tiles_x + tx].push(si as u32);
            }
        }
    }
    tile_lists
}

/// Per-pixel compositing replay for one tile: CSR over the tile's pixels in
/// row-major tile-local order.
#[derive(Debug, Clone, Default)]
pub struct TileReplay {
    pub offsets: Vec<u32>,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vector3<f64>>,
    pub depth: Vec<f64>,
    pub fg: Vec<f64>,
    pub alpha: Vec<f64>,
    pub background: Vector3<f64>,
    /// Depth-sorted splats referenced by the replay lists.
    pub splats: Vec<SplattedGaussian>,
    pub grid: TileGrid,
    pub tile_lists: Vec<Vec<u32>>,
    pub replay: Vec<TileReplay>,
    pub final_transmittance: Vec<f64>,
    pub scene_n: usize,
    pub timestep: usize,
    pub config: RasterConfig,
}

impl RenderOutput {
    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

struct TileResult {
    tile: usize,
    color: Vec<Vector3<f64>>,
    depth: Vec<f64>,
    fg: Vec<f64>,
    alpha: Vec<f64>,
    transmittance: Vec<f64>,
    replay: TileReplay,
}

/// Renders the scene at timestep `t` into the camera, compositing
/// front-to-back over the depth-sorted contributors.
pub fn rasterize(
    scene: &GaussianScene,
    t: usize,
    camera: &CameraModel,
    background: Vector3<f64>,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    let mut splats = prepare_splats(scene, t, camera, cfg)?;
    let grid = TileGrid::new(camera.width, camera.height, cfg.tile_size);
    let tile_lists = depth_sort_and_cull(&mut splats, &grid, cfg.cull_radius, cfg.f_min);

    let max_f = 1.0 - cfg.alpha_clamp;
    let results: Vec<TileResult> = (0..grid.n_tiles())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.tile_rect(tile);
            let npix = (x1 - x0) * (y1 - y0);
            let list = &tile_lists[tile];
            let mut res = TileResult {
                tile,
                color: Vec::with_capacity(npix),
                depth: Vec::with_capacity(npix),
                fg: Vec::with_capacity(npix),
                alpha: Vec::with_capacity(npix),
                transmittance: Vec::with_capacity(npix),
                replay: TileReplay {
                    offsets: Vec::with_capacity(npix + 1),
                    indices: Vec::new(),
                },
            };
            res.replay.offsets.push(0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let mut t_cur = 1.0f64;
                    let mut color = Vector3::zeros();
                    let mut depth = 0.0f64;
                    let mut fg = 0.0f64;
                    for &si in list {
                        let s = &splats[si as usize];
                        let dx = px - s.mean2d.x;
                        let dy = py - s.mean2d.y;
                        let qf = s.conic.0 * dx * dx + 2.0 * s.conic.1 * dx * dy + s.conic.2 * dy * dy;
                        let f = (s.opacity * (-0.5 * qf).exp()).min(max_f);
                        if f < cfg.f_min {
                            continue;
                        }
                        let w = f * t_cur;
                        color += s.color * w;
                        depth += s.depth * w;
                        fg += s.fg_prob * w;
                        res.replay.indices.push(si);
                        t_cur *= 1.0 - f;
                        if t_cur < cfg.term_threshold {
                            break;
                        }
                    }
                    color += background * t_cur;
                    res.color.push(color);
                    res.depth.push(depth);
                    res.fg.push(fg);
                    res.alpha.push(1.0 - t_cur);
                    res.transmittance.push(t_cur);
                    res.replay.offsets.push(res.replay.indices.len() as u32);
                }
            }
            res
        })
        .collect();

    let npix = camera.pixel_count();
    let mut out = RenderOutput {
        width: camera.width,
        height: camera.height,
        color: vec![background; npix],
        depth: vec![0.0; npix],
        fg: vec![0.0; npix],
        alpha: vec![0.0; npix],
        background,
        splats,
        grid,
        tile_lists,
        replay: vec![TileReplay::default(); grid.n_tiles()],
        final_transmittance: vec![1.0; npix],
        scene_n: scene.n(),
        timestep: t,
        config: *cfg,
    };
    for res in results {
        let (x0, y0, x1, y1) = grid.tile_rect(res.tile);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * camera.width + x;
                out.color[p] = res.color[k];
                out.depth[p] = res.depth[k];
                out.fg[p] = res.fg[k];
                out.alpha[p] = res.alpha[k];
                out.final_transmittance[p] = res.transmittance[k];
                k += 1;
            }
        }
        out.replay[res.tile] = res.replay;
    }
    Ok(out)
}
