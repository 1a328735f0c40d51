//! Loss gradients against finite differences, boundary map analytics and
//! algebraic properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xseg_core::losses::{
    box_filter, boundary_enhance, dice_loss, point_loss, total_loss, LossConfig,
};
use xseg_core::points::PointChannel;
use xseg_core::{Geometry, ProbMap3};

mod common;
use common::box_oracle;
use common::grad::{central_differences, relative_error};

const STEP: f64 = 1e-4;

fn random_prob(rng: &mut ChaCha8Rng, n: usize) -> ProbMap3 {
    let g = Geometry::isotropic([n; 3]).unwrap();
    ProbMap3::from_fn(g, |_, _, _| rng.random_range(0.05..0.95)).unwrap()
}

/// Max of two unit-height Gaussians at random voxels.
fn two_point_channel(rng: &mut ChaCha8Rng, n: usize) -> PointChannel {
    let g = Geometry::isotropic([n; 3]).unwrap();
    let pts: Vec<[f64; 3]> = (0..2)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..n) as f64))
        .collect();
    let sigma = 2.0;
    let map = ProbMap3::from_fn(g, |x, y, z| {
        pts.iter()
            .map(|p| {
                let d2 = (x as f64 - p[0]).powi(2)
                    + (y as f64 - p[1]).powi(2)
                    + (z as f64 - p[2]).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .fold(0.0, f64::max)
    })
    .unwrap();
    PointChannel { map, sigma }
}

fn with(p: &ProbMap3, data: &[f64]) -> ProbMap3 {
    ProbMap3::new(*p.geometry(), data.to_vec()).unwrap()
}

fn sample_coords(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [8, 12] {
        let p = random_prob(&mut rng, n);
        let y = random_prob(&mut rng, n);
        let (_, grad) = dice_loss(&p, &y).unwrap();
        let coords = sample_coords(&mut rng, p.len(), 600);
        let fd = central_differences(p.data(), &coords, STEP, |d| {
            dice_loss(&with(&p, d), &y).unwrap().0
        });
        let an: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        let err = relative_error(&an, &fd);
        assert!(err < 1e-4, "n={n}: {err:e}");
    }
}

#[test]
fn point_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LossConfig {
        alpha: 1.0,
        kernel_n: 3,
        depth: 5,
    };
    for n in [8, 16] {
        let p = random_prob(&mut rng, n);
        let pts = two_point_channel(&mut rng, n);
        let (_, grad) = point_loss(&p, &pts, &cfg).unwrap();
        let coords = sample_coords(&mut rng, p.len(), 400);
        let fd = central_differences(p.data(), &coords, STEP, |d| {
            point_loss(&with(&p, d), &pts, &cfg).unwrap().0
        });
        let an: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        let err = relative_error(&an, &fd);
        assert!(err < 1e-4, "n={n}: {err:e}");
    }
}

#[test]
fn total_loss_composes_and_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig {
        alpha: 0.5,
        kernel_n: 3,
        depth: 5,
    };
    let n = 10;
    let p = random_prob(&mut rng, n);
    let y = random_prob(&mut rng, n);
    let pts = two_point_channel(&mut rng, n);
    let (l, grad) = total_loss(&p, &y, &pts, &cfg).unwrap();
    let d = dice_loss(&p, &y).unwrap().0;
    let pl = point_loss(&p, &pts, &cfg).unwrap().0;
    assert!((l - (d + 0.5 * pl)).abs() < 1e-9);
    let coords = sample_coords(&mut rng, p.len(), 400);
    let fd = central_differences(p.data(), &coords, STEP, |v| {
        total_loss(&with(&p, v), &y, &pts, &cfg).unwrap().0
    });
    let an: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
    assert!(relative_error(&an, &fd) < 1e-4);
}

#[test]
fn separable_box_matches_direct_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (dims, n, depth) in [([6, 5, 4], 3, 3), ([7, 7, 7], 5, 2), ([2, 9, 3], 3, 4)] {
        let len = dims.iter().product();
        let f: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let a = box_filter(&f, dims, n, depth);
        let b = box_oracle(&f, dims, n, depth);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn step_boundary_peaks_at_the_interface() {
    let n = 32;
    let g = Geometry::isotropic([n; 3]).unwrap();
    let p = ProbMap3::from_fn(g, |x, _, _| (x >= 16) as u8 as f64).unwrap();
    let cfg = LossConfig {
        alpha: 0.1,
        kernel_n: 3,
        depth: 5,
    };
    let map = boundary_enhance(&p, &cfg);
    let blur = box_filter(p.data(), [n; 3], 3, 5);
    let row = |f: &[f64]| -> Vec<f64> { (0..n).map(|x| f[g.index(x, 9, 20)]).collect() };
    let m = row(map.data());
    let b = row(&blur);
    // the interface sits halfway between planes 15 and 16
    assert!(((b[15] + b[16]) / 2.0 - 0.5).abs() < 1e-12);
    for k in 0..16 {
        assert!((m[15 - k] - m[16 + k]).abs() < 1e-12);
    }
    for x in 0..15 {
        assert!(m[x] <= m[x + 1]);
    }
    let low = (-0.25f64).exp();
    assert!((m[0] - low).abs() < 1e-6);
    assert!((m[31] - low).abs() < 1e-6);
    assert!(m[15] > 0.95);
    // the same holds on every row of the plane
    for z in 0..n {
        for y in 0..n {
            assert_eq!(map.get(15, y, z), m[15]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dice_is_bounded_and_symmetric(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_prob(&mut rng, n);
        let y = random_prob(&mut rng, n);
        let (a, _) = dice_loss(&p, &y).unwrap();
        let (b, _) = dice_loss(&y, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn boundary_range_and_flip_symmetry(seed in any::<u64>(), n in 2usize..9, depth in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::isotropic([n; 3]).unwrap();
        let p = ProbMap3::from_fn(g, |_, _, _| if rng.random_bool(0.3) { rng.random_range(0..2) as f64 } else { rng.random() }).unwrap();
        let flipped = ProbMap3::new(g, p.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let cfg = LossConfig { alpha: 0.1, kernel_n: 3, depth };
        let a = boundary_enhance(&p, &cfg);
        let b = boundary_enhance(&flipped, &cfg);
        let low = (-0.25f64).exp();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(*x >= low - 1e-15 && *x <= 1.0);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn point_loss_sign(seed in any::<u64>(), n in 2usize..8, empty in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_prob(&mut rng, n);
        let g = *p.geometry();
        let map = if empty {
            ProbMap3::filled(g, 0.0).unwrap()
        } else {
            ProbMap3::from_fn(g, |_, _, _| if rng.random_bool(0.2) { rng.random() } else { 0.0 }).unwrap()
        };
        let has_mass = map.data().iter().any(|&v| v > 0.0);
        let (l, _) = point_loss(&p, &PointChannel { map, sigma: 1.0 }, &LossConfig::for_side(n)).unwrap();
        prop_assert!(l <= 0.0);
        prop_assert_eq!(l < 0.0, has_mass);
    }

    #[test]
    fn box_filter_is_self_adjoint(seed in any::<u64>(), depth in 1usize..5, wide in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [8, 8, 8];
        let kernel = if wide { 5 } else { 3 };
        let u: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bu = box_filter(&u, dims, kernel, depth);
        let bv = box_filter(&v, dims, kernel, depth);
        let lhs: f64 = bu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&bv).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}
