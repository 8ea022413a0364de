mod common;

use common::{oracle_render, random_scene};
use gmae::canvas::Image;
use gmae::gaussian::{activate_parameters, Gaussian, GaussianSet, RawGaussians, ScaleClamp};
use gmae::gradcheck::{check_render_gradients, random_raw_scene, random_weights, Tolerance};
use gmae::render::{project, render, render_backward, render_naive, render_tiled, CameraConfig, RenderError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blob(center: [f64; 3], scale: f64, color: [f64; 3], opacity: f64) -> Gaussian {
    Gaussian {
        center,
        scale: [scale; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        color,
        opacity,
    }
}

#[test]
fn tiled_equals_naive_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w, k) in [(64, 64, 256), (17, 40, 30), (5, 3, 8), (33, 16, 64)] {
        let gs = random_scene(&mut rng, k);
        let cam = CameraConfig::new(h, w).with_background([0.2, 0.5, 0.9]);
        let screen = project(&gs, &cam).unwrap();
        let a = render_tiled(&screen, &gs, &cam);
        let b = render_naive(&screen, &gs, &cam);
        assert_eq!(a.image, b.image);
        assert_eq!(a.transmittance, b.transmittance);
        assert_eq!(a.touch_count, b.touch_count);
    }
}

#[test]
fn matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let gs = random_scene(&mut rng, 40);
        let cam = CameraConfig::new(24, 20).with_background([1.0, 0.0, 0.5]);
        let out = render(&gs, &cam).unwrap();
        let (img, trans) = oracle_render(&gs, &cam);
        assert!(out.image.max_abs_diff(&img) < 1e-12);
        for (a, b) in out.transmittance.iter().zip(&trans) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn touch_count_matches_cutoff() {
    let cam = CameraConfig::new(32, 32);
    // Isotropic: screen variance is 16² s² + 0.3 per axis.
    let s: f64 = 0.1;
    let gs = GaussianSet::new_unchecked(vec![blob([0.0, 0.0, 0.0], s, [1.0; 3], 0.5)]);
    let out = render(&gs, &cam).unwrap();
    let var = 256.0 * s * s + 0.3;
    let mut expected = 0;
    for y in 0..32 {
        for x in 0..32 {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            if (dx * dx + dy * dy) / var <= 9.0 {
                expected += 1;
            }
        }
    }
    assert_eq!(out.touch_count, vec![expected]);
}

#[test]
fn empty_scene_renders_background_exactly() {
    let cam = CameraConfig::new(9, 13).with_background([0.25, 0.5, 0.75]);
    let out = render(&GaussianSet::default(), &cam).unwrap();
    assert_eq!(out.image, Image::filled(9, 13, [0.25, 0.5, 0.75]));
    assert!(out.transmittance.iter().all(|&t| t == 1.0));
}

#[test]
fn gaussian_outside_view_leaves_background() {
    let mut cam = CameraConfig::new(16, 16).with_background([0.1, 0.2, 0.3]);
    cam.pixel_scale = [40.0, 40.0];
    let gs = GaussianSet::new_unchecked(vec![blob([0.9, -0.9, 0.0], 0.01, [1.0; 3], 0.9)]);
    let out = render(&gs, &cam).unwrap();
    assert_eq!(out.touch_count, vec![0]);
    assert_eq!(out.image, Image::filled(16, 16, [0.1, 0.2, 0.3]));
    let mut raw = [0.0; 14];
    raw[..6].copy_from_slice(&[3.0, -3.0, 0.0, -6.0, -6.0, -6.0]);
    raw[13] = 2.0;
    let grads = render_backward(
        &RawGaussians::new(vec![raw]),
        ScaleClamp::default(),
        &cam,
        &Image::filled(16, 16, [1.0; 3]),
    )
    .unwrap();
    assert!(grads[0].iter().all(|&g| g == 0.0));
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let raw = random_raw_scene(&mut rng, 20);
    let cam = CameraConfig::new(16, 16);
    let g = render_backward(&raw, ScaleClamp::default(), &cam, &Image::new(16, 16)).unwrap();
    assert!(g.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn non_finite_upstream_is_reported_with_location() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let raw = random_raw_scene(&mut rng, 3);
    let cam = CameraConfig::new(8, 8);
    let mut up = Image::new(8, 8);
    up.set_pixel(5, 2, [0.0, f64::NAN, 0.0]);
    let err = render_backward(&raw, ScaleClamp::default(), &cam, &up).unwrap_err();
    assert_eq!(err, RenderError::NonFiniteGradient { y: 5, x: 2, channel: 1 });
    let err = render_backward(&raw, ScaleClamp::default(), &cam, &Image::new(8, 7)).unwrap_err();
    assert!(matches!(err, RenderError::ShapeMismatch { .. }));
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cam = CameraConfig::new(16, 16).with_background([0.3, 0.6, 0.1]);
    for k in [1, 4] {
        let raw = random_raw_scene(&mut rng, k);
        let w = random_weights(&mut rng, 16, 16);
        for c in check_render_gradients(&raw, ScaleClamp::default(), &cam, &w, Tolerance::default()).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}

#[test]
fn invalid_camera_is_rejected() {
    let mut cam = CameraConfig::new(8, 8);
    cam.depth_range = [1.0, 1.0];
    assert!(matches!(render(&GaussianSet::default(), &cam), Err(RenderError::Camera(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transmittance_telescopes(seed in any::<u64>(), k in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = random_scene(&mut rng, k);
        // White Gaussians on black give Σ αᵢTᵢ per channel.
        let white = GaussianSet::new_unchecked(gs.iter().map(|g| Gaussian { color: [1.0; 3], ..*g }).collect());
        let cam = CameraConfig::new(20, 20);
        let out = render(&white, &cam).unwrap();
        for (p, t) in out.image.data().chunks(3).zip(&out.transmittance) {
            prop_assert!((p[0] + t - 1.0).abs() <= 1e-6);
            prop_assert!(*t >= 0.0 && *t <= 1.0);
        }
    }

    #[test]
    fn permutation_invariant(seed in any::<u64>(), k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = random_scene(&mut rng, k);
        let mut items = gs.items().to_vec();
        items.reverse();
        items.rotate_left(k / 3);
        let cam = CameraConfig::new(20, 20).with_background([0.4, 0.4, 0.4]);
        let a = render(&gs, &cam).unwrap().image;
        let b = render(&GaussianSet::new_unchecked(items), &cam).unwrap().image;
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn output_stays_in_unit_range(seed in any::<u64>(), k in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = random_scene(&mut rng, k);
        let cam = CameraConfig::new(16, 16).with_background([1.0, 0.0, 0.5]);
        let out = render(&gs, &cam).unwrap();
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn activation_ranges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_raw_scene(&mut rng, 8);
        let clamp = ScaleClamp::new(0.7).unwrap();
        for g in activate_parameters(&raw, clamp).unwrap().iter() {
            prop_assert!(g.center.iter().all(|c| c.abs() <= 1.0));
            prop_assert!(g.scale.iter().all(|s| *s > 0.0 && *s <= 0.7));
            prop_assert!((g.rotation.iter().map(|q| q * q).sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(g.color.iter().chain([&g.opacity]).all(|v| *v >= 0.0 && *v <= 1.0));
        }
    }
}
