//! Single-channel floating-point images.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Row-major grayscale image; pixel `(x, y)` covers `[x, x+1) × [y, y+1)` and
/// its value sits at the integer coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Argument(format!(
                "image buffer has {} values, expected {}×{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel with reflect-101 border handling (`-1 -> 1`, `w -> w-2`).
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> f64 {
        self.get(reflect(x, self.width), reflect(y, self.height))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    /// Bilinear interpolation with clamped borders.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self.data.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        );
        (i % self.width, i / self.width)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    /// Separable Gaussian blur with reflected borders; `sigma <= 0` copies.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    acc += kv * row[xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (k, kv) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - r, h);
                let src = &tmp[yy * w..(yy + 1) * w];
                let dst = &mut out[y * w..(y + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += kv * s);
            }
        }
        Image {
            width: w,
            height: h,
            data: out,
        }
    }

    /// Box-filter downsampling by an integer factor (trailing partial blocks dropped).
    pub fn downsample(&self, factor: usize) -> Image {
        let factor = factor.max(1);
        let w = (self.width / factor).max(1);
        let h = (self.height / factor).max(1);
        let mut out = Image::new(w, h);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let sx = (x * factor + dx).min(self.width - 1);
                        let sy = (y * factor + dy).min(self.height - 1);
                        acc += self.get(sx, sy);
                    }
                }
                out.set(x, y, acc * norm);
            }
        }
        out
    }

    /// Resample through a backward map: `out(q) = self(inverse(q))`.
    ///
    /// The map is evaluated exactly on a grid every `step` pixels and
    /// bilinearly interpolated in between, which is accurate for smooth warps.
    pub fn warp_backward(&self, inverse: impl Fn(Point2) -> Point2, step: usize) -> Image {
        let step = step.max(1);
        let (w, h) = (self.width, self.height);
        let gw = (w - 1) / step + 2;
        let gh = (h - 1) / step + 2;
        let mut grid = Vec::with_capacity(gw * gh);
        for gy in 0..gh {
            for gx in 0..gw {
                grid.push(inverse(Point2::new((gx * step) as f64, (gy * step) as f64)));
            }
        }
        let mut out = Image::new(w, h);
        let inv_step = 1.0 / step as f64;
        for y in 0..h {
            let gy = y / step;
            let fy = (y - gy * step) as f64 * inv_step;
            for x in 0..w {
                let gx = x / step;
                let fx = (x - gx * step) as f64 * inv_step;
                let p00 = grid[gy * gw + gx];
                let p10 = grid[gy * gw + gx + 1];
                let p01 = grid[(gy + 1) * gw + gx];
                let p11 = grid[(gy + 1) * gw + gx + 1];
                let top = p00 * (1.0 - fx) + p10 * fx;
                let bottom = p01 * (1.0 - fx) + p11 * fx;
                let src = top * (1.0 - fy) + bottom * fy;
                let inside = src.x >= -0.5 && src.y >= -0.5 && src.x <= w as f64 - 0.5 && src.y <= h as f64 - 0.5;
                if inside {
                    out.set(x, y, self.sample(src.x, src.y));
                }
            }
        }
        out
    }

    /// Save as 16-bit grayscale PNG; values are clamped to [0, 1].
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
                Luma([(v * 65535.0).round() as u16])
            });
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        Image::from_vec(w as usize, h as usize, data)
    }
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Normalised Gaussian taps covering ±3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::from_vec(7, 5, vec![0.4; 35]).unwrap();
        let b = img.gaussian_blur(1.5);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn bilinear_midpoint() {
        let img = Image::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((img.sample(0.5, 0.5) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identity_warp_copies() {
        let data: Vec<f64> = (0..64).map(|v| (v as f64 * 0.37).sin().abs()).collect();
        let img = Image::from_vec(8, 8, data).unwrap();
        let w = img.warp_backward(|p| p, 3);
        for (a, b) in w.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..30).map(|v| v as f64 / 29.0).collect();
        let img = Image::from_vec(6, 5, data).unwrap();
        img.save_png16(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}
