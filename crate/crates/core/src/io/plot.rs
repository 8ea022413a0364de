use crate::canvas::Image;

const MARGIN: usize = 12;
const AXIS: [f64; 3] = [0.2, 0.2, 0.2];
const GRID: [f64; 3] = [0.88, 0.88, 0.88];

/// Minimal scatter rasteriser: white canvas, axis frame, a 4×4 grid of
/// guide lines and one filled dot per point. Ranges are padded by 5%.
pub struct Scatter {
    pub width: usize,
    pub height: usize,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    /// Dot radius in pixels.
    pub radius: f64,
    /// Whether y grows upward (plots) or downward (image coordinates).
    pub y_up: bool,
}

impl Default for Scatter {
    fn default() -> Self {
        Self {
            width: 320,
            height: 320,
            x_range: None,
            y_range: None,
            radius: 1.6,
            y_up: true,
        }
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    (lo - 0.05 * span, hi + 0.05 * span)
}

impl Scatter {
    pub fn render(&self, points: &[(f64, f64)], colors: &[[f64; 3]]) -> Image {
        let mut img = Image::filled(self.height, self.width, [1.0; 3]);
        let (x0, x1) = self.x_range.unwrap_or_else(|| padded_range(points.iter().map(|p| p.0)));
        let (y0, y1) = self.y_range.unwrap_or_else(|| padded_range(points.iter().map(|p| p.1)));
        let (pw, ph) = ((self.width - 2 * MARGIN) as f64, (self.height - 2 * MARGIN) as f64);
        let (left, right) = (MARGIN, self.width - MARGIN - 1);
        let (top, bottom) = (MARGIN, self.height - MARGIN - 1);

        for k in 1..4 {
            let gx = left + (pw * k as f64 / 4.0) as usize;
            let gy = top + (ph * k as f64 / 4.0) as usize;
            for y in top..=bottom {
                img.set_pixel(y, gx, GRID);
            }
            for x in left..=right {
                img.set_pixel(gy, x, GRID);
            }
        }
        for x in left..=right {
            img.set_pixel(top, x, AXIS);
            img.set_pixel(bottom, x, AXIS);
        }
        for y in top..=bottom {
            img.set_pixel(y, left, AXIS);
            img.set_pixel(y, right, AXIS);
        }

        let r = self.radius;
        let reach = r.ceil() as i64;
        for (i, &(px, py)) in points.iter().enumerate() {
            if !(px.is_finite() && py.is_finite()) {
                continue;
            }
            let color = colors.get(i).copied().unwrap_or([0.1, 0.3, 0.8]);
            let u = MARGIN as f64 + (px - x0) / (x1 - x0) * pw;
            let t = (py - y0) / (y1 - y0) * ph;
            let v = MARGIN as f64 + if self.y_up { ph - t } else { t };
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if ((dx * dx + dy * dy) as f64) > r * r {
                        continue;
                    }
                    let (xx, yy) = (u.round() as i64 + dx, v.round() as i64 + dy);
                    if xx >= left as i64 && xx <= right as i64 && yy >= top as i64 && yy <= bottom as i64 {
                        img.set_pixel(yy as usize, xx as usize, color);
                    }
                }
            }
        }
        img
    }
}
