use std::path::Path;

use image::{ImageBuffer, Luma};

use super::DataError;

/// Single-channel float raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(width * height, data.len(), "image buffer does not match {width}x{height}");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Box-average downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0, "factor must divide the image size");
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = &self.data[(y * factor + dy) * self.width + x * factor..][..factor];
                    s += row.iter().sum::<f32>();
                }
                out.data[y * w + x] = s * norm;
            }
        }
        out
    }

    /// Integer shift with zero fill: pixel `(x, y)` moves to `(x + dx, y + dy)`.
    pub fn translated(&self, dx: i64, dy: i64) -> Image {
        let mut out = Image::new(self.width, self.height);
        let (w, h) = (self.width as i64, self.height as i64);
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    out.data[(y * w + x) as usize] = self.data[(sy * w + sx) as usize];
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with clamped edges.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
        let total: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / total).collect();
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = Image::new(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, i) in kernel.iter().zip(-radius..=radius) {
                    let sx = (x + i).clamp(0, w - 1);
                    s += k * self.data[(y * w + sx) as usize];
                }
                tmp.data[(y * w + x) as usize] = s;
            }
        }
        let mut out = Image::new(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, i) in kernel.iter().zip(-radius..=radius) {
                    let sy = (y + i).clamp(0, h - 1);
                    s += k * tmp.data[(sy * w + x) as usize];
                }
                out.data[(y * w + x) as usize] = s;
            }
        }
        out
    }
}

/// Writes `[0, 1]` values as a lossless 16-bit grayscale PNG.
pub fn save_png16(path: &Path, img: &Image) -> Result<(), DataError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })
}

/// Reads a 16-bit grayscale PNG written by [`save_png16`].
pub fn load_png16(path: &Path) -> Result<Image, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    Ok(Image::from_vec(w as usize, h as usize, luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()))
}

/// Reads any supported image, converts it to one channel and resizes it to `size` x `size`.
pub fn load_any_image(path: &Path, size: usize) -> Result<Image, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?;
    let mut luma = img.into_luma16();
    if luma.dimensions() != (size as u32, size as u32) {
        luma = image::imageops::resize(&luma, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    Ok(Image::from_vec(size, size, luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_vec(8, 4, (0..32).map(|i| i as f32 / 31.0).collect());
        save_png16(&path, &img).unwrap();
        let back = load_png16(&path).unwrap();
        assert_eq!((back.width(), back.height()), (8, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        let resized = load_any_image(&path, 16).unwrap();
        assert_eq!((resized.width(), resized.height()), (16, 16));
    }

    #[test]
    fn translation_and_downsample() {
        let img = Image::from_vec(4, 4, (0..16).map(|i| i as f32).collect());
        let t = img.translated(1, -1);
        assert_eq!(t.get(1, 0), img.get(0, 1));
        assert_eq!(t.get(0, 0), 0.0);
        assert_eq!(t.get(3, 3), 0.0);
        let d = img.downsample(2);
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::from_vec(10, 10, vec![0.25; 100]);
        let b = img.gaussian_blur(1.5);
        assert!(b.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
