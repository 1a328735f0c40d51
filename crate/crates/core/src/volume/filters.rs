use super::{Geometry, Grid3, Volume3};
use crate::error::{Error, Result};

/// Per-voxel gradient magnitude with partials in intensity-per-voxel units.
///
/// Central differences in the interior, one-sided differences on the faces.
pub fn gradient_magnitude(v: &Volume3) -> Result<Volume3> {
    let geom = *v.geometry();
    if geom.dims.iter().any(|&n| n < 2) {
        return Err(Error::Geometry(format!(
            "gradient needs at least 2 voxels per axis, got {:?}",
            geom.dims
        )));
    }
    let data = v.data();
    let mut sq = vec![0.0f64; geom.len()];
    for axis in 0..3 {
        let n = geom.dims[axis];
        let stride = geom.stride(axis);
        for (idx, acc) in sq.iter_mut().enumerate() {
            let c = geom.coords(idx)[axis];
            let d = if c == 0 {
                data[idx + stride] as f64 - data[idx] as f64
            } else if c == n - 1 {
                data[idx] as f64 - data[idx - stride] as f64
            } else {
                (data[idx + stride] as f64 - data[idx - stride] as f64) * 0.5
            };
            *acc += d * d;
        }
    }
    Ok(Grid3::from_parts(
        geom,
        sq.into_iter().map(|s| s.sqrt() as f32).collect(),
    ))
}

/// Linear interpolation along one axis with corner-aligned sampling.
fn resample_axis(src: &[f64], dims: [usize; 3], axis: usize, target: usize) -> Vec<f64> {
    let n = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = target;
    let out_len = out_dims.iter().product();
    if n == target {
        return src.to_vec();
    }
    // Source sample position, left index and weight for each target index.
    let taps: Vec<(usize, f64)> = (0..target)
        .map(|i| {
            if n == 1 || target == 1 {
                return (0, 0.0);
            }
            let c = i as f64 * (n - 1) as f64 / (target - 1) as f64;
            let i0 = (c.floor() as usize).min(n - 2);
            (i0, c - i0 as f64)
        })
        .collect();
    let in_stride: usize = dims[..axis].iter().product();
    let out_stride: usize = out_dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; out_len];
    for o in 0..outer {
        for inner in 0..in_stride {
            let in_base = o * in_stride * n + inner;
            let out_base = o * out_stride * target + inner;
            for (i, &(i0, t)) in taps.iter().enumerate() {
                let a = src[in_base + i0 * in_stride];
                let v = if n == 1 {
                    a
                } else {
                    let b = src[in_base + (i0 + 1) * in_stride];
                    ((1.0 - t) * a + t * b).clamp(a.min(b), a.max(b))
                };
                out[out_base + i * out_stride] = v;
            }
        }
    }
    out
}

/// Trilinear resampling of a raw f64 field; used for volumes and probability maps.
pub(crate) fn resample_field(src: &[f64], dims: [usize; 3], target: [usize; 3]) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        cur = resample_axis(&cur, cur_dims, axis, target[axis]);
        cur_dims[axis] = target[axis];
    }
    cur
}

pub(crate) fn resampled_geometry(geom: &Geometry, target: [usize; 3]) -> Result<Geometry> {
    let mut spacing = geom.spacing;
    for a in 0..3 {
        spacing[a] = geom.spacing[a] * (geom.dims[a] - 1) as f64 / (target[a] - 1) as f64;
    }
    Geometry::new(target, spacing)
}

/// Trilinear resampling with corner-aligned coordinates; the physical extent
/// between the first and last voxel centers is preserved.
pub fn resample_trilinear(v: &Volume3, target: [usize; 3]) -> Result<Volume3> {
    let geom = v.geometry();
    if geom.dims.iter().chain(target.iter()).any(|&n| n < 2) {
        return Err(Error::Geometry(format!(
            "resampling needs >= 2 voxels per axis: {:?} -> {target:?}",
            geom.dims
        )));
    }
    let src: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let out = resample_field(&src, geom.dims, target);
    Ok(Grid3::from_parts(
        resampled_geometry(geom, target)?,
        out.into_iter().map(|x| x as f32).collect(),
    ))
}

/// Normalized 1D Gaussian taps, truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

pub(crate) fn convolve_axis_replicate(
    src: &[f64],
    dims: [usize; 3],
    axis: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let n = dims[axis] as i64;
    let radius = (kernel.len() / 2) as i64;
    let stride: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * stride * n as usize + inner;
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let j = (i + k as i64 - radius).clamp(0, n - 1);
                    acc += w * src[base + j as usize * stride];
                }
                out[base + i as usize * stride] = acc;
            }
        }
    }
    out
}

pub(crate) fn smooth_field(src: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let mut cur = src.to_vec();
    for axis in 0..3 {
        cur = convolve_axis_replicate(&cur, dims, axis, &kernel);
    }
    cur
}

/// Separable Gaussian smoothing with replicated borders.
pub fn gaussian_smooth(v: &Volume3, sigma: f64) -> Result<Volume3> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let src: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let out = smooth_field(&src, v.dims(), sigma);
    Ok(Grid3::from_parts(
        *v.geometry(),
        out.into_iter().map(|x| x as f32).collect(),
    ))
}
