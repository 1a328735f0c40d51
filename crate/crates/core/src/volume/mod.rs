//! Dense 3D containers and the voxel-level operations built on them.
//!
//! All grids store their voxels in x-fastest order: the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

mod filters;
pub mod io;
mod morphology;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filters::{gaussian_kernel, gaussian_smooth, gradient_magnitude, resample_trilinear};
pub(crate) use filters::{resample_field, resampled_geometry};
pub use morphology::{dilate_ball, erode_ball, squared_distance_transform};

/// Voxel counts and physical spacing (mm) of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Geometry(format!("dims {dims:?} overflow")))?;
        Ok(Self { dims, spacing })
    }

    /// Unit spacing.
    pub fn isotropic(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Stride of one step along `axis` in the linear layout.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(self.dims)
            .all(|(&c, n)| c.is_finite() && c >= 0.0 && c <= (n - 1) as f64)
    }

    pub(crate) fn check_same(&self, other: &Geometry) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }
}

/// Element types a [`Grid3`] may hold, each with its own validity rule.
pub trait Voxel: Copy + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const KIND: &'static str;
    fn is_valid(self) -> bool;
    fn as_f64(self) -> f64;
}

impl Voxel for f32 {
    const KIND: &'static str = "intensity";
    fn is_valid(self) -> bool {
        self.is_finite()
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Voxel for u8 {
    const KIND: &'static str = "mask";
    fn is_valid(self) -> bool {
        self <= 1
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Voxel for f64 {
    const KIND: &'static str = "probability";
    fn is_valid(self) -> bool {
        (0.0..=1.0).contains(&self)
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense 3D field whose every voxel satisfies [`Voxel::is_valid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    geom: Geometry,
    data: Vec<T>,
}

/// Image intensities (and derived scalar fields such as gradient magnitude).
pub type Volume3 = Grid3<f32>;
/// Binary mask with values in {0, 1}.
pub type Mask3 = Grid3<u8>;
/// Per-voxel probability in [0, 1].
pub type ProbMap3 = Grid3<f64>;

impl<T: Voxel> Grid3<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::SizeMismatch {
                expected: geom.len(),
                actual: data.len(),
            });
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, v)| !v.is_valid()) {
            return Err(Error::InvalidValue {
                kind: T::KIND,
                value: v.as_f64(),
                index,
            });
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(geom, data)
    }

    /// Skips value validation; callers guarantee the invariant.
    pub(crate) fn from_parts(geom: Geometry, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), geom.len());
        debug_assert!(data.iter().all(|v| v.is_valid()));
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geom.index(x, y, z)]
    }

    /// Same voxel values under a different spacing.
    pub fn with_spacing(self, spacing: [f64; 3]) -> Result<Self> {
        let geom = Geometry::new(self.geom.dims, spacing)?;
        Ok(Self {
            geom,
            data: self.data,
        })
    }
}

impl Mask3 {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn from_bools(geom: Geometry, bits: &[bool]) -> Result<Self> {
        Self::new(geom, bits.iter().map(|&b| b as u8).collect())
    }

    pub fn complement(&self) -> Mask3 {
        Self::from_parts(self.geom, self.data.iter().map(|&v| 1 - v).collect())
    }

    pub fn union(&self, other: &Mask3) -> Result<Mask3> {
        self.geom.check_same(&other.geom)?;
        Ok(Self::from_parts(
            self.geom,
            self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        ))
    }
}

impl ProbMap3 {
    /// `p >= threshold` as a mask.
    pub fn threshold(&self, threshold: f64) -> Mask3 {
        Grid3::from_parts(
            self.geom,
            self.data.iter().map(|&p| (p >= threshold) as u8).collect(),
        )
    }

    /// Rounds every value through `f32`, the precision `.vvol` stores.
    pub fn quantize_f32(&self) -> ProbMap3 {
        Grid3::from_parts(
            self.geom,
            self.data.iter().map(|&p| p as f32 as f64).collect(),
        )
    }
}

impl From<&Mask3> for ProbMap3 {
    fn from(m: &Mask3) -> Self {
        Grid3::from_parts(m.geom, m.data.iter().map(|&v| v as f64).collect())
    }
}
