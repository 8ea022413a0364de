mod common;

use common::{oracle_render, random_scene};
use gmae::gaussian::GaussianSet;
use gmae::render::{render, CameraConfig};
use gmae::zeroshot::{
    assign_layers, best_split, cumulative_render, edge_detect, figure_ground, group_gaussians, index_edges, iou,
    GroupMode, UNASSIGNED,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn subset(gs: &GaussianSet, keep: impl Fn(usize) -> bool) -> GaussianSet {
    GaussianSet::new_unchecked(gs.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, g)| *g).collect())
}

#[test]
fn full_prefix_equals_full_render_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gs = random_scene(&mut rng, 96);
    let cam = CameraConfig::new(32, 32).with_background([0.5, 0.1, 0.9]);
    let full = render(&gs, &cam).unwrap().image;
    assert_eq!(cumulative_render(&gs, 96, &cam).unwrap(), full);
    for mode in [GroupMode::EqualCount, GroupMode::EqualDepthWidth] {
        let stack = assign_layers(&gs, 16, mode, 0.05, &cam).unwrap();
        assert_eq!(stack.cumulative[16], full);
        assert_eq!(stack.cumulative[0], render(&GaussianSet::default(), &cam).unwrap().image);
    }
    assert!(cumulative_render(&gs, 97, &cam).is_err());
}

#[test]
fn prefix_renders_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let gs = random_scene(&mut rng, 40);
    let cam = CameraConfig::new(20, 20);
    let mut z: Vec<(f64, usize)> = gs.iter().enumerate().map(|(i, g)| (g.center[2], i)).collect();
    z.sort_by(|a, b| a.0.total_cmp(&b.0));
    for p in [0, 1, 7, 20, 39] {
        let nearest: Vec<usize> = z[..p].iter().map(|&(_, i)| i).collect();
        let (oracle, _) = oracle_render(&subset(&gs, |i| nearest.contains(&i)), &cam);
        assert!(cumulative_render(&gs, p, &cam).unwrap().max_abs_diff(&oracle) < 1e-12, "prefix {p}");
    }
}

#[test]
fn equal_count_groups_are_balanced_and_depth_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let gs = random_scene(&mut rng, 64);
    let cam = CameraConfig::new(8, 8);
    let groups = group_gaussians(&gs, 16, GroupMode::EqualCount, &cam).unwrap();
    for g in 0..16 {
        assert_eq!(groups.iter().filter(|&&x| x == g).count(), 4);
    }
    for i in 0..64 {
        for j in 0..64 {
            if gs.items()[i].center[2] < gs.items()[j].center[2] {
                assert!(groups[i] <= groups[j]);
            }
        }
    }
    let by_width = group_gaussians(&gs, 4, GroupMode::EqualDepthWidth, &cam).unwrap();
    for (i, g) in gs.iter().enumerate() {
        let expected = (((g.center[2] + 1.0) / 2.0 * 4.0).floor() as usize).min(3);
        assert_eq!(by_width[i], expected);
    }
}

#[test]
fn layer_index_is_first_prefix_exceeding_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let gs = random_scene(&mut rng, 48);
    let cam = CameraConfig::new(24, 24).with_background([0.2, 0.2, 0.2]);
    let d = 8;
    let stack = assign_layers(&gs, d, GroupMode::EqualCount, 0.05, &cam).unwrap();
    let prefixes: Vec<_> = (0..=d).map(|n| oracle_render(&subset(&gs, |i| stack.group_of[i] < n), &cam).0).collect();
    for y in 0..24 {
        for x in 0..24 {
            let change = |n: usize| {
                let (a, b) = (prefixes[n + 1].pixel(y, x), prefixes[n].pixel(y, x));
                (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
            };
            let expected = (0..d).find(|&n| change(n) > 0.05).map_or(UNASSIGNED, |n| n as i32);
            assert_eq!(stack.layer_at(y, x), expected, "pixel ({y}, {x})");
        }
    }
    assert_eq!(assign_layers(&gs, d, GroupMode::EqualCount, 0.05, &cam).unwrap(), stack);
}

#[test]
fn vanishing_threshold_covers_every_touched_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let gs = random_scene(&mut rng, 30);
    let cam = CameraConfig::new(24, 24);
    let stack = assign_layers(&gs, 6, GroupMode::EqualCount, 1e-300, &cam).unwrap();
    let full = render(&gs, &cam).unwrap();
    for (p, &i) in stack.index.iter().enumerate() {
        // Anything that changes a pixel leaves transmittance below 1.
        assert_eq!(i != UNASSIGNED, full.transmittance[p] < 1.0, "pixel {p}");
    }
}

#[test]
fn figure_ground_split_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let gs = random_scene(&mut rng, 40);
    let cam = CameraConfig::new(16, 16);
    let stack = assign_layers(&gs, 4, GroupMode::EqualCount, 0.05, &cam).unwrap();
    let assigned: Vec<bool> = stack.index.iter().map(|&i| i >= 0).collect();
    assert_eq!(figure_ground(&stack, 0).mask, assigned);
    assert_eq!(figure_ground(&stack, 4).count(), 0);
    for t in 0..4 {
        assert!(figure_ground(&stack, t + 1).count() <= figure_ground(&stack, t).count());
    }
    let truth = figure_ground(&stack, 2).mask;
    let (t, score) = best_split(&stack, &truth);
    assert_eq!(score, 1.0);
    assert_eq!(iou(&figure_ground(&stack, t).mask, &truth), 1.0);
}

#[test]
fn left_right_halves_give_boundary_pair() {
    let (h, w) = (5, 8);
    let index: Vec<i32> = (0..h * w).map(|p| if p % w < 4 { 0 } else { 1 }).collect();
    let edges = index_edges(&index, h, w);
    for p in 0..h * w {
        assert_eq!(edges[p], p % w == 3 || p % w == 4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn edges_are_exactly_index_discontinuities(seed in any::<u64>(), d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = random_scene(&mut rng, 24);
        let cam = CameraConfig::new(16, 16);
        let stack = assign_layers(&gs, d, GroupMode::EqualDepthWidth, 0.05, &cam).unwrap();
        let edges = edge_detect(&stack);
        for y in 0..16usize {
            for x in 0..16usize {
                let v = stack.layer_at(y, x);
                let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                let differs = neighbours.iter().any(|&(yy, xx)| yy < 16 && xx < 16 && stack.layer_at(yy, xx) != v);
                prop_assert_eq!(edges.edges[y * 16 + x], differs);
            }
        }
        let (counts, none) = stack.histogram();
        prop_assert_eq!(counts.iter().sum::<usize>() + none, 256);
    }
}
