#![allow(dead_code)]

use gmae::canvas::Image;
use gmae::gaussian::{activate_parameters, Gaussian, GaussianSet, ScaleClamp};
use gmae::gradcheck::random_raw_scene;
use gmae::render::CameraConfig;
use rand::Rng;

pub fn random_scene(rng: &mut impl Rng, count: usize) -> GaussianSet {
    activate_parameters(&random_raw_scene(rng, count), ScaleClamp::default()).unwrap()
}

fn quat_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Upper-left 2×2 block of `R diag(s²) Rᵀ`.
fn cov_xy(g: &Gaussian) -> [f64; 3] {
    let r = quat_rotation(g.rotation);
    let s2 = g.scale.map(|s| s * s);
    let entry = |i: usize, j: usize| (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum::<f64>();
    [entry(0, 0), entry(0, 1), entry(1, 1)]
}

/// Straight-line compositor written from the rendering definition alone.
pub fn oracle_render(gs: &GaussianSet, cam: &CameraConfig) -> (Image, Vec<f64>) {
    let (h, w) = (cam.height, cam.width);
    let [sx, sy] = cam.pixel_scale;
    let mut order: Vec<usize> = (0..gs.len()).collect();
    let depth = |i: usize| gs.items()[i].center[2];
    order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)));
    let prepared: Vec<([f64; 2], [f64; 3])> = gs
        .iter()
        .map(|g| {
            let c = cov_xy(g);
            let a = sx * sx * c[0] + cam.dilation;
            let b = sx * sy * c[1];
            let d = sy * sy * c[2] + cam.dilation;
            let det = a * d - b * b;
            (
                [w as f64 / 2.0 + sx * g.center[0], h as f64 / 2.0 + sy * g.center[1]],
                [d / det, -b / det, a / det],
            )
        })
        .collect();
    let mut img = Image::new(h, w);
    let mut trans = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for &i in &order {
                let (mean, inv) = prepared[i];
                let (dx, dy) = (x as f64 - mean[0], y as f64 - mean[1]);
                let m = inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy;
                if m > cam.cutoff * cam.cutoff {
                    continue;
                }
                let alpha = (gs.items()[i].opacity * (-0.5 * m).exp()).min(0.999);
                for c in 0..3 {
                    rgb[c] += gs.items()[i].color[c] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for c in 0..3 {
                rgb[c] += t * cam.background[c];
            }
            img.set_pixel(y, x, rgb);
            trans[y * w + x] = t;
        }
    }
    (img, trans)
}
