use crate::canvas::Image;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A training image with an optional known foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Row-major, `true` on the foreground object.
    pub foreground: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ellipse,
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
}

/// One synthetic scene: a vertical-gradient background and a single flat or
/// striped shape whose pixels form the foreground.
pub fn shape_scene(rng: &mut impl Rng, height: usize, width: usize) -> Sample {
    let top = random_color(rng);
    let bottom = random_color(rng);
    let mut fill = random_color(rng);
    let bg_mid = std::array::from_fn(|c| 0.5 * (top[c] + bottom[c]));
    while color_distance(fill, bg_mid) < 0.35 {
        fill = random_color(rng);
    }
    let stripes = rng.random_bool(0.3);
    let stripe_color = fill.map(|v| (v * 0.6).clamp(0.0, 1.0));
    let shape = match rng.random_range(0..4) {
        0 => Shape::Disk,
        1 => Shape::Square,
        2 => Shape::Triangle,
        _ => Shape::Ellipse,
    };
    let size = height.min(width) as f64;
    let radius = rng.random_range(0.18..0.36) * size;
    let cy = rng.random_range(radius * 0.6..height as f64 - radius * 0.6);
    let cx = rng.random_range(radius * 0.6..width as f64 - radius * 0.6);
    let aspect: f64 = rng.random_range(0.5..1.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();

    let inside = |y: f64, x: f64| -> bool {
        let (dy, dx) = (y - cy, x - cx);
        match shape {
            Shape::Disk => dx * dx + dy * dy <= radius * radius,
            Shape::Square => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
            Shape::Triangle => {
                // Upward triangle with apex at cy - r and base at cy + r/2.
                let v = dy + radius;
                v >= 0.0 && dy <= radius * 0.5 && dx.abs() <= v * 0.577_350_269
            }
            Shape::Ellipse => {
                let u = cos * dx + sin * dy;
                let w = -sin * dx + cos * dy;
                (u / radius).powi(2) + (w / (radius * aspect)).powi(2) <= 1.0
            }
        }
    };

    let mut image = Image::new(height, width);
    let mut mask = vec![false; height * width];
    for y in 0..height {
        let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
        let bg = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
        for x in 0..width {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            if inside(fy, fx) {
                mask[y * width + x] = true;
                let band = ((fx + fy) / 4.0).floor() as i64 % 2 == 0;
                image.set_pixel(y, x, if stripes && band { stripe_color } else { fill });
            } else {
                image.set_pixel(y, x, bg);
            }
        }
    }
    Sample {
        image,
        foreground: Some(mask),
    }
}

/// `count` scenes from one RNG stream.
pub fn shape_corpus(rng: &mut impl Rng, count: usize, height: usize, width: usize) -> Vec<Sample> {
    (0..count).map(|_| shape_scene(rng, height, width)).collect()
}

/// Magnitude-jittered random augmentation over a fixed op list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandAugment {
    pub num_ops: usize,
    /// On the usual 0..=10 scale.
    pub magnitude: f64,
    pub magnitude_std: f64,
}

impl Default for RandAugment {
    fn default() -> Self {
        Self {
            num_ops: 2,
            magnitude: 9.0,
            magnitude_std: 0.5,
        }
    }
}

/// Per-sample augmentation pipeline: crop, then flip, then RandAugment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Area fraction range for random resized crops; `None` disables them.
    pub crop_scale: Option<(f64, f64)>,
    pub hflip: bool,
    pub randaug: Option<RandAugment>,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            crop_scale: Some((0.2, 1.0)),
            hflip: true,
            randaug: None,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            crop_scale: None,
            hflip: false,
            randaug: None,
        }
    }

    pub fn apply(&self, image: &Image, rng: &mut impl Rng) -> Image {
        let (h, w) = image.dims();
        let mut out = match self.crop_scale {
            Some(scale) => random_resized_crop(image, scale, rng),
            None => image.clone(),
        };
        if self.hflip && rng.random_bool(0.5) {
            out = out.flip_horizontal();
        }
        if let Some(ra) = self.randaug {
            out = rand_augment(&out, ra, rng);
        }
        debug_assert_eq!(out.dims(), (h, w));
        out
    }
}

/// Random crop of area fraction in `scale` and aspect ratio in [3/4, 4/3],
/// resized back to the input size. Falls back to a center crop.
pub fn random_resized_crop(image: &Image, scale: (f64, f64), rng: &mut impl Rng) -> Image {
    let (h, w) = image.dims();
    let (hf, wf) = (h as f64, w as f64);
    let area = hf * wf;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lo..=hi).exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= wf && ch <= hf {
            let y0 = rng.random_range(0.0..=hf - ch).floor();
            let x0 = rng.random_range(0.0..=wf - cw).floor();
            return image.crop_resize(y0, x0, ch, cw, h, w);
        }
    }
    image.clone()
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Affine resample with nearest-neighbour lookup and a gray fill, as the
/// usual geometric RandAugment ops do. `m` maps output to input coordinates.
fn affine(image: &Image, m: [f64; 6]) -> Image {
    let (h, w) = image.dims();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut out = Image::filled(h, w, [0.5; 3]);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = m[0] * dx + m[1] * dy + m[2] + cx;
            let sy = m[3] * dx + m[4] * dy + m[5] + cy;
            if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                out.set_pixel(y, x, image.pixel(sy as usize, sx as usize));
            }
        }
    }
    out
}

fn blend(a: &Image, b: &Image, factor: f64) -> Image {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (y + factor * (x - y)).clamp(0.0, 1.0))
        .collect();
    Image::from_vec(a.height(), a.width(), data)
}

/// One RandAugment draw: `num_ops` ops chosen uniformly with replacement,
/// each at a magnitude jittered by `magnitude_std` and clipped to [0, 10].
pub fn rand_augment(image: &Image, cfg: RandAugment, rng: &mut impl Rng) -> Image {
    const OPS: usize = 12;
    let jitter = Normal::new(cfg.magnitude, cfg.magnitude_std.max(0.0)).expect("finite std");
    let mut out = image.clone();
    for _ in 0..cfg.num_ops {
        let op = rng.random_range(0..OPS);
        let level = jitter.sample(rng).clamp(0.0, 10.0) / 10.0;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        out = match op {
            0 => out,
            1 => {
                let (lo, hi) = out.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
                if hi > lo {
                    out.map(|v| (v - lo) / (hi - lo))
                } else {
                    out
                }
            }
            2 => blend(&out, &Image::new(out.height(), out.width()), 1.0 + sign * 0.9 * level),
            3 => {
                let n = (out.height() * out.width()) as f64;
                let mean = out.data().chunks(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n;
                let gray = Image::filled(out.height(), out.width(), [mean; 3]);
                blend(&out, &gray, 1.0 + sign * 0.9 * level)
            }
            4 => {
                let mut gray = out.clone();
                for p in gray.data_mut().chunks_mut(3) {
                    let l = luma([p[0], p[1], p[2]]);
                    p.fill(l);
                }
                blend(&out, &gray, 1.0 + sign * 0.9 * level)
            }
            5 => {
                let th = 1.0 - level;
                out.map(|v| if v >= th { 1.0 - v } else { v })
            }
            6 => {
                let bits = 8 - (level * 4.0).round() as u32;
                let step = (1u32 << (8 - bits)) as f64;
                out.map(|v| ((v * 255.0).round() / step).floor() * step / 255.0)
            }
            7 => {
                let a = (sign * 30.0 * level).to_radians();
                let (s, c) = a.sin_cos();
                affine(&out, [c, s, 0.0, -s, c, 0.0])
            }
            8 => affine(&out, [1.0, sign * 0.3 * level, 0.0, 0.0, 1.0, 0.0]),
            9 => affine(&out, [1.0, 0.0, 0.0, sign * 0.3 * level, 1.0, 0.0]),
            10 => {
                let t = sign * 0.45 * level * out.width() as f64;
                affine(&out, [1.0, 0.0, t, 0.0, 1.0, 0.0])
            }
            _ => {
                let t = sign * 0.45 * level * out.height() as f64;
                affine(&out, [1.0, 0.0, 0.0, 0.0, 1.0, t])
            }
        };
    }
    out
}
