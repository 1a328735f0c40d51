//! Geodesic foreground scribbles between opposing extreme points, background
//! seeds, and the labeled seed grid fed to the random walker.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::points::ExtremePoints;
use crate::volume::io::{read_raw, write_raw, Dtype, Header};
use crate::volume::{dilate_ball, gradient_magnitude, Geometry, Grid3, Mask3, Volume3, Voxel};

/// Foreground scribble dilation radius, in voxels.
pub const FOREGROUND_RADIUS: usize = 2;

/// Background dilation radius for a crop of side `side`: 30 voxels at 128,
/// scaled proportionally.
pub fn background_radius(side: usize) -> usize {
    (30.0 * side as f64 / 128.0).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SeedLabel {
    Unmarked = 0,
    Foreground = 1,
    Background = 2,
}

impl Voxel for SeedLabel {
    const KIND: &'static str = "seed";
    fn is_valid(self) -> bool {
        true
    }
    fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

impl TryFrom<u8> for SeedLabel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SeedLabel::Unmarked),
            1 => Ok(SeedLabel::Foreground),
            2 => Ok(SeedLabel::Background),
            _ => Err(Error::InvalidValue {
                kind: "seed",
                value: v as f64,
                index: 0,
            }),
        }
    }
}

/// Per-voxel random walker seed labels.
pub type Seeds = Grid3<SeedLabel>;

impl Seeds {
    pub fn count_label(&self, label: SeedLabel) -> usize {
        self.data().iter().filter(|&&l| l == label).count()
    }

    pub fn mask_of(&self, label: SeedLabel) -> Mask3 {
        Grid3::from_parts(
            *self.geometry(),
            self.data().iter().map(|&l| (l == label) as u8).collect(),
        )
    }
}

/// Stores seeds as a `u8` `.vvol` with labels 0/1/2.
pub fn save_seeds(path: impl AsRef<Path>, seeds: &Seeds) -> Result<()> {
    let header = Header {
        dims: seeds.dims(),
        spacing_mm: seeds.spacing(),
        dtype: Dtype::U8,
    };
    let bytes: Vec<u8> = seeds.data().iter().map(|&l| l as u8).collect();
    write_raw(path, &header, &bytes)
}

pub fn load_seeds(path: impl AsRef<Path>) -> Result<Seeds> {
    let (header, bytes) = read_raw(path)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::invalid("seed volumes must have dtype u8"));
    }
    let geom = Geometry::new(header.dims, header.spacing_mm)?;
    let labels = bytes
        .iter()
        .enumerate()
        .map(|(index, &b)| {
            SeedLabel::try_from(b).map_err(|_| Error::InvalidValue {
                kind: "seed",
                value: b as f64,
                index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Grid3::new(geom, labels)
}

/// A voxel path and its accumulated cost.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicPath {
    pub voxels: Vec<[usize; 3]>,
    pub cost: f64,
}

/// The 26 neighbor offsets in a fixed order, with their Euclidean lengths.
pub fn neighbor_offsets() -> Vec<([i64; 3], f64)> {
    let mut out = Vec::with_capacity(26);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let len = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                out.push(([dx, dy, dz], len));
            }
        }
    }
    out
}

/// Offset added to every node cost so flat regions favor the shortest path.
pub fn path_epsilon(cost: &Volume3) -> f64 {
    let mean = cost.data().iter().map(|&d| d as f64).sum::<f64>() / cost.len() as f64;
    1e-3 * mean + 1e-9
}

/// Cost of stepping `len` between voxels with node costs `du` and `dv`.
#[inline]
pub fn edge_cost(du: f64, dv: f64, len: f64, eps: f64) -> f64 {
    len * (eps + (du + dv) / 2.0)
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    idx: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, idx)
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimal-cost 26-connected path between two voxels (Dijkstra).
pub fn geodesic_path(cost: &Volume3, start: [usize; 3], end: [usize; 3]) -> Result<GeodesicPath> {
    let geom = *cost.geometry();
    for p in [start, end] {
        if (0..3).any(|a| p[a] >= geom.dims[a]) {
            return Err(Error::OutOfBounds {
                point: p.map(|c| c as f64),
                dims: geom.dims,
            });
        }
    }
    let eps = path_epsilon(cost);
    let d: Vec<f64> = cost.data().iter().map(|&c| c as f64).collect();
    let offsets = neighbor_offsets();
    let source = geom.index(start[0], start[1], start[2]);
    let target = geom.index(end[0], end[1], end[2]);

    let mut dist = vec![f64::INFINITY; geom.len()];
    let mut prev = vec![usize::MAX; geom.len()];
    let mut done = vec![false; geom.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier {
        dist: 0.0,
        idx: source,
    });
    while let Some(Frontier { dist: du, idx: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == target {
            break;
        }
        let c = geom.coords(u);
        for &(off, len) in &offsets {
            let n = [0, 1, 2].map(|a| c[a] as i64 + off[a]);
            if (0..3).any(|a| n[a] < 0 || n[a] >= geom.dims[a] as i64) {
                continue;
            }
            let v = geom.index(n[0] as usize, n[1] as usize, n[2] as usize);
            if done[v] {
                continue;
            }
            let alt = du + edge_cost(d[u], d[v], len, eps);
            if alt < dist[v] {
                dist[v] = alt;
                prev[v] = u;
                heap.push(Frontier { dist: alt, idx: v });
            }
        }
    }

    let mut voxels = vec![end];
    let mut cur = target;
    while cur != source {
        cur = prev[cur];
        voxels.push(geom.coords(cur));
    }
    voxels.reverse();
    Ok(GeodesicPath {
        voxels,
        cost: dist[target],
    })
}

/// The three axis paths `x_min -> x_max`, `y_min -> y_max`, `z_min -> z_max`
/// on the gradient magnitude of `crop`.
pub fn scribble_paths(crop: &Volume3, e: &ExtremePoints) -> Result<Vec<GeodesicPath>> {
    e.validate(crop.dims())?;
    let cost = gradient_magnitude(crop)?;
    let pts = e.rounded();
    (0..3)
        .map(|axis| geodesic_path(&cost, pts[2 * axis], pts[2 * axis + 1]))
        .collect()
}

/// Union of the three geodesic scribbles, dilated by a ball of `radius`.
pub fn foreground_scribbles(crop: &Volume3, e: &ExtremePoints, radius: usize) -> Result<Mask3> {
    let paths = scribble_paths(crop, e)?;
    let geom = *crop.geometry();
    let mut data = vec![0u8; geom.len()];
    for p in paths.iter().flat_map(|p| &p.voxels) {
        data[geom.index(p[0], p[1], p[2])] = 1;
    }
    Ok(dilate_ball(&Grid3::from_parts(geom, data), radius))
}

/// Everything farther than `radius` from the foreground scribbles.
pub fn background_seeds(fg: &Mask3, radius: usize) -> Result<Mask3> {
    if fg.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let bg = dilate_ball(fg, radius).complement();
    if bg.count() == 0 {
        return Err(Error::EmptyBackground { radius });
    }
    Ok(bg)
}

pub fn build_seeds(fg: &Mask3, bg: &Mask3) -> Result<Seeds> {
    fg.geometry().check_same(bg.geometry())?;
    let overlap = fg
        .data()
        .iter()
        .zip(bg.data())
        .filter(|(&f, &b)| f != 0 && b != 0)
        .count();
    if overlap > 0 {
        return Err(Error::SeedOverlap { count: overlap });
    }
    if fg.count() == 0 {
        return Err(Error::EmptySeedClass("foreground"));
    }
    if bg.count() == 0 {
        return Err(Error::EmptySeedClass("background"));
    }
    let labels = fg
        .data()
        .iter()
        .zip(bg.data())
        .map(|(&f, &b)| match (f, b) {
            (1, _) => SeedLabel::Foreground,
            (_, 1) => SeedLabel::Background,
            _ => SeedLabel::Unmarked,
        })
        .collect();
    Ok(Grid3::from_parts(*fg.geometry(), labels))
}

/// Foreground scribbles plus background seeds for one crop.
pub fn seeds_from_points(
    crop: &Volume3,
    e: &ExtremePoints,
    fg_radius: usize,
    bg_radius: usize,
) -> Result<Seeds> {
    let fg = foreground_scribbles(crop, e, fg_radius)?;
    let bg = background_seeds(&fg, bg_radius)?;
    build_seeds(&fg, &bg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize) -> Volume3 {
        Grid3::filled(Geometry::isotropic([n; 3]).unwrap(), 2.0).unwrap()
    }

    #[test]
    fn flat_cost_gives_straight_line() {
        let cost = gradient_magnitude(&constant(9)).unwrap();
        let p = geodesic_path(&cost, [0, 4, 4], [8, 4, 4]).unwrap();
        let expect: Vec<[usize; 3]> = (0..9).map(|x| [x, 4, 4]).collect();
        assert_eq!(p.voxels, expect);
    }

    #[test]
    fn trivial_path() {
        let cost = gradient_magnitude(&constant(4)).unwrap();
        let p = geodesic_path(&cost, [1, 2, 3], [1, 2, 3]).unwrap();
        assert_eq!(p.voxels, vec![[1, 2, 3]]);
        assert_eq!(p.cost, 0.0);
        assert!(geodesic_path(&cost, [4, 0, 0], [0, 0, 0]).is_err());
    }

    #[test]
    fn coincident_points_give_one_ball() {
        let e = ExtremePoints::splat([4.0, 4.0, 4.0]);
        let fg = foreground_scribbles(&constant(9), &e, FOREGROUND_RADIUS).unwrap();
        assert_eq!(fg.count(), 33);
    }

    #[test]
    fn axis_pairs_on_flat_crop_give_three_tubes() {
        let e = ExtremePoints {
            x_min: [1.0, 5.0, 5.0],
            x_max: [9.0, 5.0, 5.0],
            y_min: [5.0, 1.0, 5.0],
            y_max: [5.0, 9.0, 5.0],
            z_min: [5.0, 5.0, 1.0],
            z_max: [5.0, 5.0, 9.0],
        };
        let fg = foreground_scribbles(&constant(11), &e, 0).unwrap();
        assert_eq!(fg.count(), 3 * 9 - 2);
        assert_eq!(fg.get(3, 5, 5), 1);
        assert_eq!(fg.get(5, 3, 5), 1);
        assert_eq!(fg.get(3, 3, 5), 0);
    }

    #[test]
    fn background_radius_rules() {
        assert_eq!(background_radius(128), 30);
        assert_eq!(background_radius(64), 15);

        let g = Geometry::isotropic([8; 3]).unwrap();
        let fg = Grid3::from_fn(g, |x, y, z| ([x, y, z] == [4, 4, 4]) as u8).unwrap();
        assert_eq!(background_seeds(&fg, 0).unwrap(), fg.complement());
        assert!(matches!(
            background_seeds(&fg, 14),
            Err(Error::EmptyBackground { radius: 14 })
        ));
    }

    #[test]
    fn build_seeds_contract() {
        let g = Geometry::isotropic([3, 1, 1]).unwrap();
        let fg = Mask3::new(g, vec![1, 0, 0]).unwrap();
        let bg = Mask3::new(g, vec![0, 0, 1]).unwrap();
        let s = build_seeds(&fg, &bg).unwrap();
        assert_eq!(
            s.data(),
            &[SeedLabel::Foreground, SeedLabel::Unmarked, SeedLabel::Background]
        );
        assert!(matches!(
            build_seeds(&fg, &fg),
            Err(Error::SeedOverlap { count: 1 })
        ));
        let none = Mask3::new(g, vec![0, 0, 0]).unwrap();
        assert!(build_seeds(&none, &bg).is_err());
        assert!(build_seeds(&fg, &none).is_err());
    }

    #[test]
    fn seeds_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::isotropic([3, 1, 1]).unwrap();
        let s = Seeds::new(
            g,
            vec![SeedLabel::Background, SeedLabel::Unmarked, SeedLabel::Foreground],
        )
        .unwrap();
        save_seeds(dir.path().join("s.vvol"), &s).unwrap();
        assert_eq!(load_seeds(dir.path().join("s.vvol")).unwrap(), s);
    }
}
