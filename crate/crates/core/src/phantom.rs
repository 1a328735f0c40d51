//! Synthetic test volumes with exact ground-truth masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Grid3, Mask3, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipsoid,
    /// An ellipsoid with a notch carved out along +y by a second, translated
    /// ellipsoid. Concave but 6-connected.
    Bean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// mm
    pub semi_axes: [f64; 3],
    /// mm, with voxel `i` centered at `i * spacing`.
    pub center: [f64; 3],
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Ellipsoid,
            dims: [64; 3],
            spacing: [1.0; 3],
            semi_axes: [14.0, 11.0, 9.0],
            center: [31.5; 3],
            fg_intensity: 1.0,
            bg_intensity: 0.0,
            noise_sigma: 0.1,
            texture_amplitude: 0.0,
            rng_seed: 0,
        }
    }
}

/// Cosine-product frequencies (cycles per volume side) of the texture terms.
const TEXTURE_FREQS: [[f64; 3]; 3] = [[2.0, 3.0, 1.0], [3.0, 1.0, 4.0], [5.0, 4.0, 3.0]];

impl PhantomSpec {
    /// Centers the shape in the volume.
    pub fn centered(mut self) -> Self {
        for a in 0..3 {
            self.center[a] = (self.dims[a] - 1) as f64 * self.spacing[a] / 2.0;
        }
        self
    }

    fn validate(&self) -> Result<Geometry> {
        let geom = Geometry::new(self.dims, self.spacing)?;
        if self.semi_axes.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(Error::invalid(format!(
                "semi-axes must be > 0, got {:?}",
                self.semi_axes
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        for a in 0..3 {
            let lo = (self.center[a] - self.semi_axes[a]) / self.spacing[a];
            let hi = (self.center[a] + self.semi_axes[a]) / self.spacing[a];
            if lo < 2.0 || hi > (self.dims[a] - 3) as f64 {
                return Err(Error::invalid(format!(
                    "shape spans voxels [{lo:.1}, {hi:.1}] on axis {a}, which leaves less than a 2-voxel margin in {}",
                    self.dims[a]
                )));
            }
        }
        Ok(geom)
    }

    /// Implicit-function test at a physical position.
    fn inside(&self, p: [f64; 3]) -> bool {
        let outer = ellipsoid_level(p, self.center, self.semi_axes);
        match self.shape {
            Shape::Ellipsoid => outer <= 0.0,
            Shape::Bean => {
                let a = self.semi_axes;
                let cut_center = [self.center[0], self.center[1] + a[1], self.center[2]];
                let cut_axes = [0.45 * a[0], 0.6 * a[1], 2.0 * a[2]];
                outer <= 0.0 && ellipsoid_level(p, cut_center, cut_axes) > 0.0
            }
        }
    }
}

fn ellipsoid_level(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum::<f64>() - 1.0
}

/// Returns `(image, ground-truth mask)`, fully determined by the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3, Mask3)> {
    let geom = spec.validate()?;
    let s = spec.spacing;
    let mask = Grid3::from_fn(geom, |x, y, z| {
        spec.inside([x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]]) as u8
    })?;

    let [nx, ny, nz] = spec.dims;
    let mut values: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| {
            if m != 0 {
                spec.fg_intensity
            } else {
                spec.bg_intensity
            }
        })
        .collect();

    if spec.texture_amplitude != 0.0 {
        let tau = std::f64::consts::TAU;
        for (idx, v) in values.iter_mut().enumerate() {
            if mask.data()[idx] == 0 {
                continue;
            }
            let [x, y, z] = geom.coords(idx);
            let pos = [x as f64 / nx as f64, y as f64 / ny as f64, z as f64 / nz as f64];
            let t: f64 = TEXTURE_FREQS
                .iter()
                .map(|f| (0..3).map(|a| (tau * f[a] * pos[a]).cos()).product::<f64>())
                .sum();
            *v += spec.texture_amplitude * t / 3.0;
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let image = Grid3::new(geom, values.into_iter().map(|v| v as f32).collect())?;
    Ok((image, mask))
}
