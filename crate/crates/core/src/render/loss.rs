//! Photometric loss: (1-λ)·L1 + λ·(1-SSIM), with analytic gradients with
//! respect to the rendered image.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), C1 = (0.01·L)², C2 = (0.03·L)²
//! with L = 1, evaluated per channel over valid window positions (no padding)
//! and averaged.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_DSSIM_LAMBDA: f64 = 0.2;

/// Normalized 11×11 Gaussian window weights, row-major.
pub fn ssim_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for r in 0..SSIM_WINDOW {
        for c in 0..SSIM_WINDOW {
            let dy = r as isize - half;
            let dx = c as isize - half;
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[r * SSIM_WINDOW + c] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn check_dims(a: &[Vector3<f64>], b: &[Vector3<f64>], width: usize, height: usize) -> Result<()> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::invalid_parameter(format!(
            "image size mismatch: {} and {} pixels for {width}x{height}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels, with gradient w.r.t. `a`.
pub fn l1_mean_and_grad(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> (f64, Vec<Vector3<f64>>) {
    let inv = 1.0 / (a.len() as f64 * 3.0);
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); a.len()];
    for (i, (pa, pb)) in a.iter().zip(b.iter()).enumerate() {
        let d = pa - pb;
        loss += d.abs().sum();
        grad[i] = Vector3::new(sign(d.x), sign(d.y), sign(d.z)) * inv;
    }
    (loss * inv, grad)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct SsimAccum {
    mean: f64,
    grad: Vec<Vector3<f64>>,
}

/// Mean SSIM over valid windows and channels; optionally the gradient with
/// respect to `x`.
fn ssim_core(
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    width: usize,
    height: usize,
    want_grad: bool,
) -> Result<SsimAccum> {
    check_dims(x, y, width, height)?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::invalid_parameter(format!(
            "image {width}x{height} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let w = ssim_window();
    let nx = width - SSIM_WINDOW + 1;
    let ny = height - SSIM_WINDOW + 1;
    let n_windows = nx * ny;
    let scale = 1.0 / (n_windows as f64 * 3.0);

    let mut total = 0.0;
    let mut grad = if want_grad { vec![Vector3::zeros(); x.len()] } else { Vec::new() };

    for ch in 0..3 {
        for uy in 0..ny {
            for ux in 0..nx {
                let mut mux = 0.0;
                let mut muy = 0.0;
                let mut qx = 0.0;
                let mut qy = 0.0;
                let mut qxy = 0.0;
                for r in 0..SSIM_WINDOW {
                    let row = (uy + r) * width + ux;
                    for c in 0..SSIM_WINDOW {
                        let wk = w[r * SSIM_WINDOW + c];
                        let xv = x[row + c][ch];
                        let yv = y[row + c][ch];
                        mux += wk * xv;
                        muy += wk * yv;
                        qx += wk * xv * xv;
                        qy += wk * yv * yv;
                        qxy += wk * xv * yv;
                    }
                }
                let sxx = qx - mux * mux;
                let syy = qy - muy * muy;
                let sxy = qxy - mux * muy;
                let n1 = 2.0 * mux * muy + SSIM_C1;
                let n2 = 2.0 * sxy + SSIM_C2;
                let d1 = mux * mux + muy * muy + SSIM_C1;
                let d2 = sxx + syy + SSIM_C2;
                let s = (n1 * n2) / (d1 * d2);
                total += s;

                if want_grad {
                    // Partials of s w.r.t. (mux, sxx, sxy), then chained back
                    // onto the raw window sums.
                    let ds_dmux = 2.0 * muy * n2 / (d1 * d2) - s * 2.0 * mux / d1;
                    let ds_dsxx = -s / d2;
                    let ds_dsxy = 2.0 * n1 / (d1 * d2);
                    let a_mu = ds_dmux - 2.0 * mux * ds_dsxx - muy * ds_dsxy;
                    for r in 0..SSIM_WINDOW {
                        let row = (uy + r) * width + ux;
                        for c in 0..SSIM_WINDOW {
                            let wk = w[r * SSIM_WINDOW + c];
                            let p = row + c;
                            let xv = x[p][ch];
                            let yv = y[p][ch];
                            grad[p][ch] +=
                                wk * (a_mu + 2.0 * xv * ds_dsxx + yv * ds_dsxy) * scale;
                        }
                    }
                }
            }
        }
    }
    Ok(SsimAccum { mean: total * scale, grad })
}

pub fn ssim_mean(
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    width: usize,
    height: usize,
) -> Result<f64> {
    Ok(ssim_core(x, y, width, height, false)?.mean)
}

pub fn ssim_mean_and_grad(
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    width: usize,
    height: usize,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let acc = ssim_core(x, y, width, height, true)?;
    Ok((acc.mean, acc.grad))
}

/// Photometric image loss (1-λ)·L1 + λ·(1-SSIM) and its gradient with
/// respect to the rendered image.
pub fn image_loss(
    rendered: &[Vector3<f64>],
    target: &[Vector3<f64>],
    width: usize,
    height: usize,
    lambda: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    check_dims(rendered, target, width, height)?;
    let (l1, mut grad) = l1_mean_and_grad(rendered, target);
    if lambda == 0.0 {
        return Ok((l1, grad));
    }
    let (ssim, ssim_grad) = ssim_mean_and_grad(rendered, target, width, height)?;
    let loss = (1.0 - lambda) * l1 + lambda * (1.0 - ssim);
    for (g, sg) in grad.iter_mut().zip(&ssim_grad) {
        *g = *g * (1.0 - lambda) - sg * lambda;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut StdRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = StdRng::seed_from_u64(1);
        let img = random_image(&mut rng, 16 * 16);
        let (loss, _) = image_loss(&img, &img, 16, 16, DEFAULT_DSSIM_LAMBDA).unwrap();
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn pure_l1_on_constant_offset() {
        let a = vec![Vector3::from_element(0.6); 16 * 16];
        let b = vec![Vector3::from_element(0.5); 16 * 16];
        let (loss, _) = image_loss(&a, &b, 16, 16, 0.0).unwrap();
        assert_relative_eq!(loss, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = StdRng::seed_from_u64(2);
        let img = random_image(&mut rng, 20 * 14);
        let s = ssim_mean(&img, &img, 20, 14).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_of_negated_image_is_below_one() {
        let mut rng = StdRng::seed_from_u64(3);
        let img = random_image(&mut rng, 16 * 16);
        let neg: Vec<Vector3<f64>> = img.iter().map(|p| Vector3::from_element(1.0) - p).collect();
        let s = ssim_mean(&img, &neg, 16, 16).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let a = vec![Vector3::zeros(); 10];
        let b = vec![Vector3::zeros(); 12];
        assert!(image_loss(&a, &b, 5, 2, 0.2).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let (w, h) = (13, 12);
        let mut a = random_image(&mut rng, w * h);
        let b = random_image(&mut rng, w * h);
        let (_, grad) = image_loss(&a, &b, w, h, DEFAULT_DSSIM_LAMBDA).unwrap();
        let hstep = 1e-6;
        for _ in 0..60 {
            let p = rng.gen_range(0..a.len());
            let ch = rng.gen_range(0..3);
            let orig = a[p][ch];
            a[p][ch] = orig + hstep;
            let (lp, _) = image_loss(&a, &b, w, h, DEFAULT_DSSIM_LAMBDA).unwrap();
            a[p][ch] = orig - hstep;
            let (lm, _) = image_loss(&a, &b, w, h, DEFAULT_DSSIM_LAMBDA).unwrap();
            a[p][ch] = orig;
            let numeric = (lp - lm) / (2.0 * hstep);
            let analytic = grad[p][ch];
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-8 {
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "rel err too large: {analytic} vs {numeric}"
                );
            }
        }
    }
}
