//! Interleaved RGB images with `f64` channels.

/// `H×W×3` image stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// # Panics
    /// If `data.len() != height * width * 3`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size mismatch");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|v| v / n)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Bilinear resample with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        self.crop_resize(0.0, 0.0, self.height as f64, self.width as f64, height, width)
    }

    /// Resamples the window `[y0, y0+h) × [x0, x0+w)` (source pixel units)
    /// to `height × width`.
    pub fn crop_resize(
        &self,
        y0: f64,
        x0: f64,
        h: f64,
        w: f64,
        height: usize,
        width: usize,
    ) -> Self {
        if (y0, x0, h, w) == (0.0, 0.0, self.height as f64, self.width as f64)
            && (height, width) == self.dims()
        {
            return self.clone();
        }
        let mut out = Self::new(height, width);
        let sy = h / height as f64;
        let sx = w / width as f64;
        let max_y = self.height as f64 - 1.0;
        let max_x = self.width as f64 - 1.0;
        for oy in 0..height {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f64;
            for ox in 0..width {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f64;
                let (a, b) = (self.pixel(y_lo, x_lo), self.pixel(y_lo, x_hi));
                let (c, d) = (self.pixel(y_hi, x_lo), self.pixel(y_hi, x_hi));
                let rgb = std::array::from_fn(|k| {
                    let top = a[k] * (1.0 - tx) + b[k] * tx;
                    let bottom = c[k] * (1.0 - tx) + d[k] * tx;
                    top * (1.0 - ty) + bottom * ty
                });
                out.set_pixel(oy, ox, rgb);
            }
        }
        out
    }

    /// Places `images` left to right, separated by `gap` pixels of `fill`.
    pub fn hstack(images: &[&Image], gap: usize, fill: [f64; 3]) -> Self {
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width = images.iter().map(|i| i.width).sum::<usize>()
            + gap * images.len().saturating_sub(1);
        let mut out = Self::filled(height, width, fill);
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(y, x0 + x, img.pixel(y, x));
                }
            }
            x0 += img.width + gap;
        }
        out
    }
}
