//! Extreme points: simulation from masks, click jitter, the padded bounding
//! box, the crop/resize transform and the Gaussian point channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resample_field, resampled_geometry};
use crate::volume::{Geometry, Grid3, Mask3, ProbMap3, Volume3};

/// The six clicked surface points, two per axis, in real-valued voxel
/// coordinates `[i, j, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremePoints {
    pub x_min: [f64; 3],
    pub x_max: [f64; 3],
    pub y_min: [f64; 3],
    pub y_max: [f64; 3],
    pub z_min: [f64; 3],
    pub z_max: [f64; 3],
}

/// Wire form: `{"points": {"x_min": [i, j, k], ...}, "space": "voxel"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointsFile {
    pub points: ExtremePoints,
    pub space: String,
}

impl PointsFile {
    pub fn voxel(points: ExtremePoints) -> Self {
        Self {
            points,
            space: "voxel".to_string(),
        }
    }

    pub fn into_points(self) -> Result<ExtremePoints> {
        if self.space != "voxel" {
            return Err(Error::invalid(format!(
                "unsupported point space {:?}, expected \"voxel\"",
                self.space
            )));
        }
        Ok(self.points)
    }
}

impl ExtremePoints {
    pub fn splat(p: [f64; 3]) -> Self {
        Self::from_array([p; 6])
    }

    /// In label order `x_min, x_max, y_min, y_max, z_min, z_max`.
    pub fn to_array(&self) -> [[f64; 3]; 6] {
        [
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
        ]
    }

    pub fn from_array(a: [[f64; 3]; 6]) -> Self {
        Self {
            x_min: a[0],
            x_max: a[1],
            y_min: a[2],
            y_max: a[3],
            z_min: a[4],
            z_max: a[5],
        }
    }

    /// `(min, max)` point pair of an axis.
    pub fn pair(&self, axis: usize) -> ([f64; 3], [f64; 3]) {
        let a = self.to_array();
        (a[2 * axis], a[2 * axis + 1])
    }

    /// Checks finiteness, per-axis ordering and bounds.
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let geom = Geometry::isotropic(dims)?;
        for p in self.to_array() {
            if !geom.contains(p) {
                return Err(Error::OutOfBounds { point: p, dims });
            }
        }
        for axis in 0..3 {
            let (lo, hi) = self.pair(axis);
            if lo[axis] > hi[axis] {
                return Err(Error::invalid(format!(
                    "{}_min lies beyond {}_max ({} > {})",
                    AXIS_NAMES[axis], AXIS_NAMES[axis], lo[axis], hi[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn rounded(&self) -> [[usize; 3]; 6] {
        self.to_array()
            .map(|p| p.map(|c| c.round().max(0.0) as usize))
    }

    fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self::from_array(self.to_array().map(f))
    }
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

/// Simulated clicks: for each axis, the foreground voxel with the smallest
/// (largest) coordinate along it; ties go to the smallest remaining
/// coordinates in x, y, z order.
pub fn extract_extreme_points(gt: &Mask3) -> Result<ExtremePoints> {
    let geom = gt.geometry();
    let mut best: [Option<[usize; 3]>; 6] = [None; 6];
    // (primary, rest...) ordering key of candidate `c` for slot `s`
    let key = |s: usize, c: [usize; 3]| -> (i64, usize, usize) {
        let axis = s / 2;
        let primary = if s % 2 == 0 {
            c[axis] as i64
        } else {
            -(c[axis] as i64)
        };
        let rest: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| c[a]).collect();
        (primary, rest[0], rest[1])
    };
    for (idx, &m) in gt.data().iter().enumerate() {
        if m == 0 {
            continue;
        }
        let c = geom.coords(idx);
        for (s, slot) in best.iter_mut().enumerate() {
            if slot.is_none_or(|b| key(s, c) < key(s, b)) {
                *slot = Some(c);
            }
        }
    }
    if best[0].is_none() {
        return Err(Error::EmptyMask);
    }
    Ok(ExtremePoints::from_array(
        best.map(|b| b.expect("non-empty mask").map(|c| c as f64)),
    ))
}

/// Adds i.i.d. `N(0, sigma^2)` offsets to every coordinate, clamps into the
/// volume and swaps a min/max pair if the noise crossed them.
pub fn jitter_points(
    e: &ExtremePoints,
    sigma: f64,
    seed: u64,
    dims: [usize; 3],
) -> Result<ExtremePoints> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("jitter sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(*e);
    }
    let normal = Normal::new(0.0, sigma).map_err(|err| Error::invalid(err.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = e.to_array();
    for p in pts.iter_mut() {
        for a in 0..3 {
            p[a] = (p[a] + normal.sample(&mut rng)).clamp(0.0, (dims[a] - 1) as f64);
        }
    }
    for axis in 0..3 {
        if pts[2 * axis][axis] > pts[2 * axis + 1][axis] {
            pts.swap(2 * axis, 2 * axis + 1);
        }
    }
    Ok(ExtremePoints::from_array(pts))
}

/// Half-open voxel box `[lo, hi)` inside a source volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub source: Geometry,
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] as f64 && p[a] < self.hi[a] as f64)
    }
}

/// Tight box around the points grown by `ceil(pad_mm / spacing)` voxels on
/// every side, clamped to the volume.
pub fn compute_bbox(e: &ExtremePoints, source: Geometry, pad_mm: f64) -> Result<BoundingBox> {
    if !(pad_mm.is_finite() && pad_mm >= 0.0) {
        return Err(Error::invalid(format!("padding must be >= 0 mm, got {pad_mm}")));
    }
    let pts = e.to_array();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let min = pts.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let max = pts.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        // tolerate representation error in pad / spacing
        let pad = (pad_mm / source.spacing[a] - 1e-9).ceil().max(0.0) as i64;
        let l = min.floor() as i64 - pad;
        let h = max.ceil() as i64 + 1 + pad;
        lo[a] = l.max(0) as usize;
        hi[a] = (h.max(0) as usize).min(source.dims[a]);
    }
    if (0..3).any(|a| lo[a] >= hi[a]) {
        return Err(Error::invalid(format!(
            "points do not overlap the volume: box {lo:?}..{hi:?}"
        )));
    }
    Ok(BoundingBox { lo, hi, source })
}

/// Per-axis affine map between source voxels inside a box and the resized
/// crop: `crop = (src - lo) * (crop_n - 1) / (extent - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub bbox: BoundingBox,
    pub crop_dims: [usize; 3],
}

impl CropTransform {
    fn scale(&self, a: usize) -> f64 {
        (self.crop_dims[a] - 1) as f64 / (self.bbox.extent()[a] - 1) as f64
    }

    pub fn to_crop(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.bbox.lo[a] as f64) * self.scale(a))
    }

    pub fn to_source(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| p[a] / self.scale(a) + self.bbox.lo[a] as f64)
    }

    pub fn points_to_crop(&self, e: &ExtremePoints) -> ExtremePoints {
        e.map(|p| {
            let c = self.to_crop(p);
            [0, 1, 2].map(|a| c[a].clamp(0.0, (self.crop_dims[a] - 1) as f64))
        })
    }

    pub fn crop_geometry(&self) -> Result<Geometry> {
        let extent_geom = Geometry::new(self.bbox.extent(), self.bbox.source.spacing)?;
        resampled_geometry(&extent_geom, self.crop_dims)
    }
}

fn check_bbox(bbox: &BoundingBox, geom: &Geometry) -> Result<()> {
    if bbox.source.dims != geom.dims {
        return Err(Error::DimsMismatch {
            left: bbox.source.dims,
            right: geom.dims,
        });
    }
    for a in 0..3 {
        if bbox.lo[a] >= bbox.hi[a] || bbox.hi[a] > geom.dims[a] {
            return Err(Error::invalid(format!(
                "box {:?}..{:?} lies outside a volume of dims {:?}",
                bbox.lo, bbox.hi, geom.dims
            )));
        }
        if bbox.hi[a] - bbox.lo[a] < 2 {
            return Err(Error::invalid(format!(
                "box {:?}..{:?} is thinner than 2 voxels",
                bbox.lo, bbox.hi
            )));
        }
    }
    Ok(())
}

fn crop_f64(data: &[f64], geom: &Geometry, bbox: &BoundingBox) -> Vec<f64> {
    let ext = bbox.extent();
    let mut out = Vec::with_capacity(ext.iter().product());
    for z in bbox.lo[2]..bbox.hi[2] {
        for y in bbox.lo[1]..bbox.hi[1] {
            let row = geom.index(bbox.lo[0], y, z);
            out.extend_from_slice(&data[row..row + ext[0]]);
        }
    }
    out
}

/// Crops to the box and resamples trilinearly to `side^3`.
pub fn crop_resize(v: &Volume3, bbox: &BoundingBox, side: usize) -> Result<(Volume3, CropTransform)> {
    check_bbox(bbox, v.geometry())?;
    if side < 2 {
        return Err(Error::invalid(format!("crop side must be >= 2, got {side}")));
    }
    let t = CropTransform {
        bbox: *bbox,
        crop_dims: [side; 3],
    };
    let src: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let cropped = crop_f64(&src, v.geometry(), bbox);
    let resized = resample_field(&cropped, bbox.extent(), t.crop_dims);
    let crop = Grid3::new(
        t.crop_geometry()?,
        resized.into_iter().map(|x| x as f32).collect(),
    )?;
    Ok((crop, t))
}

/// Same sampling as [`crop_resize`] for a binary mask, re-thresholded at 0.5.
pub fn crop_resize_mask(m: &Mask3, t: &CropTransform) -> Result<Mask3> {
    check_bbox(&t.bbox, m.geometry())?;
    let src: Vec<f64> = m.data().iter().map(|&x| x as f64).collect();
    let cropped = crop_f64(&src, m.geometry(), &t.bbox);
    let resized = resample_field(&cropped, t.bbox.extent(), t.crop_dims);
    Mask3::new(
        t.crop_geometry()?,
        resized.into_iter().map(|x| (x >= 0.5) as u8).collect(),
    )
}

/// `G({e})` in crop space.
#[derive(Clone, Debug, PartialEq)]
pub struct PointChannel {
    pub map: ProbMap3,
    pub sigma: f64,
}

/// Smallest value the point channel takes, so it stays strictly positive
/// where `exp` would underflow.
const CHANNEL_FLOOR: f64 = 1e-300;

/// Voxelwise maximum of six unnormalized Gaussians `exp(-|x - e|^2 / 2 sigma^2)`.
pub fn point_channel(e: &ExtremePoints, geom: Geometry, sigma: f64) -> Result<PointChannel> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("point sigma must be > 0, got {sigma}")));
    }
    let pts = e.to_array();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let map = Grid3::from_fn(geom, |x, y, z| {
        let v = [x as f64, y as f64, z as f64];
        let d2 = pts
            .iter()
            .map(|p| (0..3).map(|a| (v[a] - p[a]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        (-d2 * inv).exp().max(CHANNEL_FLOOR)
    })?;
    Ok(PointChannel { map, sigma })
}

/// Resamples a crop-space map back onto the box and embeds it in a
/// zero-filled map of the source geometry.
pub fn map_back(p: &ProbMap3, t: &CropTransform) -> Result<ProbMap3> {
    if p.dims() != t.crop_dims {
        return Err(Error::DimsMismatch {
            left: p.dims(),
            right: t.crop_dims,
        });
    }
    let src = t.bbox.source;
    let ext = t.bbox.extent();
    let resized = resample_field(p.data(), t.crop_dims, ext);
    let mut out = vec![0.0; src.len()];
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            let dst = src.index(t.bbox.lo[0], t.bbox.lo[1] + y, t.bbox.lo[2] + z);
            let row = ext[0] * (y + ext[1] * z);
            out[dst..dst + ext[0]].copy_from_slice(&resized[row..row + ext[0]]);
        }
    }
    ProbMap3::new(src, out)
}
