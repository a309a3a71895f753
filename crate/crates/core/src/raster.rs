//! Minimal RGB raster with the resampling operations unification and
//! augmentation need. Pixels are `f32` in `[0, 1]`, stored row-major HWC.

use std::path::Path;

use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "raw image length");
        Self {
            width,
            height,
            data,
        }
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

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`),
    /// clamping to the border.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let lx = (fx - x0 as f64) as f32;
        let ly = (fy - y0 as f64) as f32;
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - lx) + b[ch] * lx;
            let bot = c[ch] * (1.0 - lx) + d[ch] * lx;
            out[ch] = top * (1.0 - ly) + bot * ly;
        }
        out
    }

    /// Resample the continuous region `region` onto an `out_w x out_h` grid.
    pub fn crop_resize(&self, region: &BBox, out_w: usize, out_h: usize) -> Image {
        let sx = region.width() / out_w as f64;
        let sy = region.height() / out_h as f64;
        let mut out = Image::filled(out_w, out_h, [0.0; 3]);
        for v in 0..out_h {
            let y = region.y0 + (v as f64 + 0.5) * sy;
            for u in 0..out_w {
                let x = region.x0 + (u as f64 + 0.5) * sx;
                out.set(u, v, self.sample(x, y));
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let full = BBox::new(0.0, 0.0, self.width as f64, self.height as f64);
        self.crop_resize(&full, out_w, out_h)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Copy `src` with its top-left corner at `(x, y)`; pixels falling
    /// outside are dropped.
    pub fn paste(&mut self, src: &Image, x: isize, y: isize) {
        for sy in 0..src.height {
            let ty = y + sy as isize;
            if ty < 0 || ty >= self.height as isize {
                continue;
            }
            for sx in 0..src.width {
                let tx = x + sx as isize;
                if tx < 0 || tx >= self.width as isize {
                    continue;
                }
                self.set(tx as usize, ty as usize, src.get(sx, sy));
            }
        }
    }

    /// Integer crop, clamped to the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Image {
        let w = w.min(self.width.saturating_sub(x));
        let h = h.min(self.height.saturating_sub(y));
        let mut out = Image::filled(w, h, [0.0; 3]);
        for v in 0..h {
            for u in 0..w {
                out.set(u, v, self.get(x + u, y + v));
            }
        }
        out
    }

    /// Planar CHW copy as `f64`.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f64;
            }
        }
        out
    }

    /// Normalized RGB histogram with `bins` levels per channel (concatenated).
    pub fn color_histogram(&self, bins: usize) -> Vec<f64> {
        let mut h = vec![0.0; 3 * bins];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                let b = ((px[c].clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
                h[c * bins + b] += 1.0;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Image {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_raw(width, height, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
    }

    pub fn load_png(path: &Path) -> Result<Image, image::ImageError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image::from_rgb8(w as usize, h as usize, img.as_raw()))
    }

    /// Mean absolute per-channel difference; images must share dimensions.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mean_abs_diff on different sizes"
        );
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        total / self.data.len().max(1) as f64
    }
}
