//! Exact Euclidean ball morphology via separable squared distance transforms.

use super::{Geometry, Grid3, Mask3};

const FAR: f64 = 1e20;

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared voxel-unit distance from every voxel to the nearest set voxel.
///
/// Voxels of an empty mask get a huge sentinel distance (>= 1e20).
pub fn squared_distance_transform(mask: &Mask3) -> Vec<f64> {
    let dims = mask.dims();
    let mut dist: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m != 0 { 0.0 } else { FAR })
        .collect();
    let max_n = *dims.iter().max().unwrap();
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0; max_n + 1];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let stride: usize = dims[..axis].iter().product();
        let outer: usize = dims[axis + 1..].iter().product();
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * stride * n + inner;
                for i in 0..n {
                    line[i] = dist[base + i * stride];
                }
                edt_1d(&line[..n], &mut out[..n], &mut v, &mut z);
                for i in 0..n {
                    dist[base + i * stride] = out[i];
                }
            }
        }
    }
    dist
}

/// Dilation by the discrete Euclidean ball `{o : |o|^2 <= r^2}`.
pub fn dilate_ball(mask: &Mask3, radius: usize) -> Mask3 {
    if radius == 0 {
        return mask.clone();
    }
    let r2 = (radius * radius) as f64;
    let dist = squared_distance_transform(mask);
    Grid3::from_parts(
        *mask.geometry(),
        dist.iter().map(|&d| (d <= r2) as u8).collect(),
    )
}

/// Erosion by the discrete Euclidean ball; voxels outside the volume count
/// as background, so set voxels within `radius` of a face are removed.
pub fn erode_ball(mask: &Mask3, radius: usize) -> Mask3 {
    if radius == 0 {
        return mask.clone();
    }
    // A one-voxel background frame holds the nearest outside voxel of every
    // interior position.
    let [nx, ny, nz] = mask.dims();
    let padded_dims = [nx + 2, ny + 2, nz + 2];
    let padded_geom = Geometry {
        dims: padded_dims,
        spacing: mask.spacing(),
    };
    let padded = Grid3::from_parts(padded_geom, {
        let mut d = vec![1u8; padded_geom.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    d[padded_geom.index(x + 1, y + 1, z + 1)] = 1 - mask.get(x, y, z);
                }
            }
        }
        d
    });
    let grown = dilate_ball(&padded, radius);
    let data = {
        let mut d = Vec::with_capacity(mask.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    d.push(1 - grown.get(x + 1, y + 1, z + 1));
                }
            }
        }
        d
    };
    Grid3::from_parts(*mask.geometry(), data)
}
