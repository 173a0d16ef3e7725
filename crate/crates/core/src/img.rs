//! Small float image buffers plus PNG I/O.
//!
//! Row-major, top-left origin, RGB channel order. Values live in [0,1] for
//! stored images; intermediate buffers may exceed that range.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vector3<f64>>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, pixels: vec![Vector3::zeros(); width * height] }
    }

    pub fn filled(width: usize, height: usize, value: Vector3<f64>) -> Self {
        RgbImage { width, height, pixels: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Vector3<f64> {
        self.pixels[y * self.width + x]
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.pixels.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            out.put_pixel(x, y, image::Rgb([quantize(px.x), quantize(px.y), quantize(px.z)]));
        }
        out.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                pixels.push(Vector3::new(
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ));
            }
        }
        Ok(RgbImage { width: w, height: h, pixels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for (i, &v) in self.pixels.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            out.put_pixel(x, y, image::Luma([quantize(v)]));
        }
        out.save(path.as_ref())?;
        Ok(())
    }

    /// Loads a mask image, binarizing at 0.5.
    pub fn load_png_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(if img.get_pixel(x as u32, y as u32)[0] > 127 { 1.0 } else { 0.0 });
            }
        }
        Ok(GrayImage { width: w, height: h, pixels })
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a depth buffer as a documented raw file:
/// magic "DPTH", u32 LE width, u32 LE height, then width*height f32 LE
/// values row-major from the top-left.
pub fn save_depth_raw(depth: &[f64], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::invalid_parameter("depth buffer size mismatch"));
    }
    let mut buf = Vec::with_capacity(12 + depth.len() * 4);
    buf.extend_from_slice(b"DPTH");
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for &d in depth {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_depth_raw(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"DPTH" {
        return Err(Error::Data("not a depth raw file".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + w * h * 4 {
        return Err(Error::Data("depth raw size mismatch".into()));
    }
    let mut depth = Vec::with_capacity(w * h);
    for chunk in bytes[12..].chunks_exact(4) {
        depth.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok((depth, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 4);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = Vector3::new(
                (i as f64 * 0.05) % 1.0,
                (i as f64 * 0.11) % 1.0,
                (i as f64 * 0.17) % 1.0,
            );
        }
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs().max() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn depth_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let depth: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let path = dir.path().join("d.raw");
        save_depth_raw(&depth, 4, 3, &path).unwrap();
        let (back, w, h) = load_depth_raw(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in depth.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
