//! Training objectives over probability maps and the Dice metric.
//!
//! The point loss rewards a boundary map of the prediction for overlapping
//! the click channel. The boundary map is built by blurring the prediction
//! with `depth` passes of an `n^3` box filter, then `exp(-(blur - 0.5)^2)`,
//! which peaks where the blurred prediction crosses one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointChannel;
use crate::volume::{Geometry, Grid3, Mask3, ProbMap3};

/// Added to the Dice denominator so two empty maps give a finite loss.
pub const DICE_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the point loss.
    pub alpha: f64,
    /// Side of the box kernel; odd.
    pub kernel_n: usize,
    /// Number of box passes.
    pub depth: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_side(64)
    }
}

impl LossConfig {
    /// Defaults for a crop of `side` voxels: 25 box passes at 128, scaled.
    pub fn for_side(side: usize) -> Self {
        Self {
            alpha: 2.0,
            kernel_n: 3,
            depth: default_depth(side),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.kernel_n < 3 || self.kernel_n % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel_n must be odd and >= 3, got {}",
                self.kernel_n
            )));
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth must be >= 1"));
        }
        Ok(())
    }
}

pub fn default_depth(side: usize) -> usize {
    ((25.0 * side as f64 / 128.0).round() as usize).max(1)
}

fn check_dims(a: &Geometry, b: &Geometry) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimsMismatch {
            left: a.dims,
            right: b.dims,
        });
    }
    Ok(())
}

/// `1 - 2 sum(p y) / (sum(p^2) + sum(y^2) + eps)` and its gradient in `p`.
pub fn dice_loss(p: &ProbMap3, y: &ProbMap3) -> Result<(f64, Vec<f64>)> {
    check_dims(p.geometry(), y.geometry())?;
    let (mut inter, mut pp, mut yy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.data().iter().zip(y.data()) {
        inter += a * b;
        pp += a * a;
        yy += b * b;
    }
    let den = pp + yy + DICE_EPSILON;
    let loss = 1.0 - 2.0 * inter / den;
    let scale = 4.0 * inter / (den * den);
    let grad = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| scale * a - 2.0 * b / den)
        .collect();
    Ok((loss, grad))
}

/// Half-sample mirror of `k` into `0..len`.
#[inline]
fn mirror(k: i64, len: i64) -> i64 {
    let m = k.rem_euclid(2 * len);
    if m >= len {
        2 * len - 1 - m
    } else {
        m
    }
}

/// One pass of a 1D box of side `n` along `axis`, weight `1/n`, with
/// mirrored borders.
fn box_axis(src: &[f64], dims: [usize; 3], axis: usize, n: usize, out: &mut [f64]) {
    let half = n as i64 / 2;
    let w = 1.0 / n as f64;
    let len = dims[axis];
    let stride: usize = dims[..axis].iter().product();
    let block = stride * len;
    if stride == 1 {
        let mut line = vec![0.0; len + n - 1];
        for (s_row, o_row) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            for (j, v) in line.iter_mut().enumerate() {
                *v = s_row[mirror(j as i64 - half, len as i64) as usize];
            }
            for (c, o) in o_row.iter_mut().enumerate() {
                *o = line[c..c + n].iter().sum::<f64>() * w;
            }
        }
        return;
    }
    for (s_block, o_block) in src.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for c in 0..len {
            let dst = &mut o_block[c * stride..(c + 1) * stride];
            dst.fill(0.0);
            for k in c as i64 - half..=c as i64 + half {
                let m = mirror(k, len as i64) as usize;
                for (d, &v) in dst.iter_mut().zip(&s_block[m * stride..(m + 1) * stride]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= w);
        }
    }
}

/// `depth` passes of the `n^3` mean filter. Self-adjoint, and constants
/// are fixed points.
pub fn box_filter(field: &[f64], dims: [usize; 3], n: usize, depth: usize) -> Vec<f64> {
    let mut cur = field.to_vec();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..depth {
        for axis in 0..3 {
            box_axis(&cur, dims, axis, n, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
    }
    cur
}

fn blurred(p: &ProbMap3, cfg: &LossConfig) -> Vec<f64> {
    box_filter(p.data(), p.dims(), cfg.kernel_n, cfg.depth)
}

/// Boundary map of `p`, valued in `[exp(-1/4), 1]`.
pub fn boundary_enhance(p: &ProbMap3, cfg: &LossConfig) -> ProbMap3 {
    let g = blurred(p, cfg)
        .into_iter()
        .map(|b| (-(b - 0.5).powi(2)).exp())
        .collect();
    Grid3::from_parts(*p.geometry(), g)
}

/// `-mean(boundary(p) * pts)` and its gradient in `p`.
pub fn point_loss(p: &ProbMap3, pts: &PointChannel, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_dims(p.geometry(), pts.map.geometry())?;
    let n = p.len() as f64;
    let blur = blurred(p, cfg);
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(blur.len());
    for (&b, &c) in blur.iter().zip(pts.map.data()) {
        let g = (-(b - 0.5).powi(2)).exp();
        loss += g * c;
        upstream.push(-(c / n) * (-2.0 * (b - 0.5)) * g);
    }
    let grad = box_filter(&upstream, p.dims(), cfg.kernel_n, cfg.depth);
    Ok((-loss / n, grad))
}

/// Dice loss plus `alpha` times the point loss.
pub fn total_loss(
    p: &ProbMap3,
    y: &ProbMap3,
    pts: &PointChannel,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (mut loss, mut grad) = dice_loss(p, y)?;
    if cfg.alpha == 0.0 {
        check_dims(p.geometry(), pts.map.geometry())?;
        return Ok((loss, grad));
    }
    let (pl, pg) = point_loss(p, pts, cfg)?;
    loss += cfg.alpha * pl;
    for (g, d) in grad.iter_mut().zip(pg) {
        *g += cfg.alpha * d;
    }
    Ok((loss, grad))
}

/// Dice overlap of two masks; 1 when both are empty.
pub fn dice_score(a: &Mask3, b: &Mask3) -> Result<f64> {
    check_dims(a.geometry(), b.geometry())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> ProbMap3 {
        ProbMap3::new(
            Geometry::isotropic([values.len(), 1, 1]).unwrap(),
            values.to_vec(),
        )
        .unwrap()
    }

    fn constant(n: usize, v: f64) -> ProbMap3 {
        ProbMap3::filled(Geometry::isotropic([n; 3]).unwrap(), v).unwrap()
    }

    fn channel(map: ProbMap3) -> PointChannel {
        PointChannel { map, sigma: 1.0 }
    }

    #[test]
    fn dice_loss_values() {
        let (l, _) = dice_loss(&line(&[1.0, 1.0, 0.0, 0.0]), &line(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((l - 0.5).abs() < 1e-7);
        let y = line(&[1.0, 0.0, 1.0, 1.0]);
        assert!(dice_loss(&y, &y).unwrap().0.abs() < 1e-7);
        let (l, _) = dice_loss(&line(&[1.0, 0.0]), &line(&[0.0, 1.0])).unwrap();
        assert_eq!(l, 1.0);
        let (l, g) = dice_loss(&line(&[0.0; 3]), &line(&[0.0; 3])).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dims_are_checked() {
        assert!(matches!(
            dice_loss(&line(&[0.0; 3]), &line(&[0.0; 4])),
            Err(Error::DimsMismatch { .. })
        ));
        let cfg = LossConfig::default();
        assert!(point_loss(&constant(4, 0.5), &channel(constant(5, 0.0)), &cfg).is_err());
        let a = Mask3::filled(Geometry::isotropic([2, 2, 2]).unwrap(), 0).unwrap();
        let b = Mask3::filled(Geometry::isotropic([2, 2, 1]).unwrap(), 0).unwrap();
        assert!(dice_score(&a, &b).is_err());
    }

    #[test]
    fn half_is_a_fixed_point() {
        let cfg = LossConfig {
            depth: 4,
            ..LossConfig::default()
        };
        let g = boundary_enhance(&constant(9, 0.5), &cfg);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_interior_reaches_lower_bound() {
        let cfg = LossConfig {
            depth: 2,
            ..LossConfig::default()
        };
        let low = (-0.25f64).exp();
        for v in [0.0, 1.0] {
            let g = boundary_enhance(&constant(12, v), &cfg);
            assert!(g.data().iter().all(|&x| (x - low).abs() < 1e-6));
        }
    }

    #[test]
    fn mirror_folds_both_sides() {
        let got: Vec<i64> = (-3..8).map(|k| mirror(k, 4)).collect();
        assert_eq!(got, [2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(mirror(-1, 1), 0);
        assert_eq!(mirror(2, 1), 0);
    }

    #[test]
    fn box_matrix_is_symmetric_and_stochastic() {
        let dims = [5, 2, 1];
        let n = dims.iter().product::<usize>();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                box_filter(&e, dims, 5, 2)
            })
            .collect();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| cols[j][i]).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in 0..n {
                assert!((cols[j][i] - cols[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_channel_gives_zero_loss() {
        let cfg = LossConfig::for_side(16);
        let p = constant(6, 0.3);
        let (l, g) = point_loss(&p, &channel(constant(6, 0.0)), &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_prediction_gives_minus_mean_channel() {
        let cfg = LossConfig::for_side(16);
        let g = Geometry::isotropic([4, 4, 4]).unwrap();
        let map = ProbMap3::from_fn(g, |x, y, z| ((x + 2 * y + 3 * z) % 5) as f64 / 4.0).unwrap();
        let mean = map.data().iter().sum::<f64>() / 64.0;
        let p = ProbMap3::filled(g, 0.5).unwrap();
        let (l, _) = point_loss(&p, &channel(map), &cfg).unwrap();
        assert!((l + mean).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_is_dice() {
        let g = Geometry::isotropic([3, 3, 3]).unwrap();
        let p = ProbMap3::from_fn(g, |x, y, _| (x + y) as f64 / 4.0).unwrap();
        let y = ProbMap3::from_fn(g, |x, _, z| ((x + z) % 2) as f64).unwrap();
        let pts = channel(ProbMap3::filled(g, 0.7).unwrap());
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(total_loss(&p, &y, &pts, &cfg).unwrap(), dice_loss(&p, &y).unwrap());
        let cfg = LossConfig {
            alpha: 1.0,
            ..LossConfig::default()
        };
        let zero = channel(ProbMap3::filled(g, 0.0).unwrap());
        let (l, _) = total_loss(&p, &y, &zero, &cfg).unwrap();
        assert_eq!(l, dice_loss(&p, &y).unwrap().0);
    }

    #[test]
    fn dice_score_counts() {
        let g = Geometry::isotropic([10, 10, 3]).unwrap();
        let a = Mask3::from_fn(g, |_, _, z| (z == 0) as u8).unwrap();
        let b = Mask3::from_fn(g, |x, _, z| (z == 0 && x < 5 || z == 1 && x >= 5) as u8).unwrap();
        assert_eq!((a.count(), b.count()), (100, 100));
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &a.complement()).unwrap(), 0.0);
        let e = Mask3::filled(g, 0).unwrap();
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn depth_scales_with_side() {
        assert_eq!(default_depth(128), 25);
        assert_eq!(default_depth(64), 13);
        assert_eq!(default_depth(2), 1);
        assert!(LossConfig { kernel_n: 4, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { depth: 0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..LossConfig::default() }.validate().is_err());
    }
}
