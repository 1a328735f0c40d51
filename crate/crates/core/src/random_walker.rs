//! Seeded two-class random walker.
//!
//! Voxels are the nodes of a 6-connected graph with weights
//! `w_ij = exp(-beta (z_i - z_j)^2)` on (optionally normalized) intensities.
//! Splitting the Laplacian into marked (M) and unmarked (U) blocks, the
//! foreground probabilities of the unmarked voxels solve
//!
//! ```text
//! L_U x = -B^T m
//! ```
//!
//! where `m` is 1 on foreground seeds and 0 on background seeds. `L_U` is
//! symmetric positive definite on every unmarked component that touches a
//! seed; it is solved with Jacobi-preconditioned conjugate gradients.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scribbles::{SeedLabel, Seeds};
use crate::volume::{Geometry, Grid3, ProbMap3, Volume3};

/// Smallest edge weight, so `exp` underflow never disconnects the graph.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Probability assigned to unmarked components that touch no seed.
pub const UNREACHABLE_PROBABILITY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RwConfig {
    pub beta: f64,
    /// Relative residual at which CG stops, measured in the Jacobi-scaled
    /// norm `sqrt(r^T D^-1 r)`.
    pub cg_tolerance: f64,
    /// `None` means `10 * sqrt(unknowns) + 1000`.
    pub cg_max_iters: Option<usize>,
    /// Rescale intensities to [0, 1] before weighting.
    pub normalize_intensities: bool,
}

impl Default for RwConfig {
    fn default() -> Self {
        Self {
            beta: 130.0,
            cg_tolerance: 1e-8,
            cg_max_iters: None,
            normalize_intensities: true,
        }
    }
}

impl RwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.cg_tolerance > 0.0 && self.cg_tolerance < 1.0) {
            return Err(Error::invalid(format!(
                "cg tolerance must be in (0, 1), got {}",
                self.cg_tolerance
            )));
        }
        if self.cg_max_iters == Some(0) {
            return Err(Error::invalid("cg_max_iters must be >= 1"));
        }
        Ok(())
    }

    fn max_iters(&self, unknowns: usize) -> usize {
        self.cg_max_iters
            .unwrap_or_else(|| (10.0 * (unknowns as f64).sqrt()) as usize + 1000)
    }
}

/// Weights of the edges from each voxel to its `+x`, `+y` and `+z`
/// neighbors. Entries for voxels on the upper face of an axis are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub geom: Geometry,
    pub along: [Vec<f64>; 3],
}

impl EdgeWeights {
    /// Calls `f(neighbor, weight)` for every 6-neighbor of voxel `idx`.
    #[inline]
    pub fn for_each_neighbor(&self, idx: usize, mut f: impl FnMut(usize, f64)) {
        let c = self.geom.coords(idx);
        for axis in 0..3 {
            let stride = self.geom.stride(axis);
            if c[axis] > 0 {
                f(idx - stride, self.along[axis][idx - stride]);
            }
            if c[axis] + 1 < self.geom.dims[axis] {
                f(idx + stride, self.along[axis][idx]);
            }
        }
    }
}

/// Intensities as seen by the weight function.
fn walker_intensities(crop: &Volume3, normalize: bool) -> Vec<f64> {
    let vals = crop.data().iter().map(|&v| v as f64);
    if !normalize {
        return vals.collect();
    }
    let (lo, hi) = crop
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if hi <= lo {
        return vec![0.5; crop.len()];
    }
    vals.map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn edge_weights(crop: &Volume3, cfg: &RwConfig) -> Result<EdgeWeights> {
    cfg.validate()?;
    let geom = *crop.geometry();
    let z = walker_intensities(crop, cfg.normalize_intensities);
    let along = [0, 1, 2].map(|axis| {
        let stride = geom.stride(axis);
        (0..geom.len())
            .map(|i| {
                if geom.coords(i)[axis] + 1 < geom.dims[axis] {
                    let d = z[i + stride] - z[i];
                    (-cfg.beta * d * d).exp().max(WEIGHT_FLOOR)
                } else {
                    0.0
                }
            })
            .collect()
    });
    Ok(EdgeWeights { geom, along })
}

/// `L_U` in compressed rows plus the right-hand sides for both classes.
#[derive(Clone, Debug)]
pub struct RwSystem {
    pub geom: Geometry,
    /// Voxel index of each unknown.
    pub voxels: Vec<usize>,
    /// Unknown index of each voxel, `None` for marked voxels.
    pub unknown_of: Vec<Option<u32>>,
    /// Full degree of each unknown, marked neighbors included.
    pub diag: Vec<f64>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    /// Positive weights; the matrix entries are their negatives.
    pub weights: Vec<f64>,
    /// Sum of weights to foreground-marked neighbors.
    pub rhs_fg: Vec<f64>,
    /// Sum of weights to background-marked neighbors.
    pub rhs_bg: Vec<f64>,
    /// Unknowns whose unmarked component has no marked neighbor.
    pub unreachable: Vec<bool>,
}

#[derive(Clone, Debug)]
pub enum Assembly {
    System(RwSystem),
    /// No unmarked voxels: the seeds are the answer.
    FullyMarked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Foreground,
    Background,
}

pub fn assemble_system(weights: &EdgeWeights, seeds: &Seeds) -> Result<Assembly> {
    let geom = weights.geom;
    geom.check_same(seeds.geometry())?;
    if seeds.count_label(SeedLabel::Foreground) == 0 {
        return Err(Error::EmptySeedClass("foreground"));
    }
    if seeds.count_label(SeedLabel::Background) == 0 {
        return Err(Error::EmptySeedClass("background"));
    }
    let labels = seeds.data();
    let voxels: Vec<usize> = (0..geom.len())
        .filter(|&i| labels[i] == SeedLabel::Unmarked)
        .collect();
    if voxels.is_empty() {
        return Ok(Assembly::FullyMarked);
    }
    let mut unknown_of = vec![None; geom.len()];
    for (k, &v) in voxels.iter().enumerate() {
        unknown_of[v] = Some(k as u32);
    }

    let n = voxels.len();
    let mut diag = vec![0.0; n];
    let mut rhs_fg = vec![0.0; n];
    let mut rhs_bg = vec![0.0; n];
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(6 * n);
    let mut wts = Vec::with_capacity(6 * n);
    let mut touches_seed = vec![false; n];
    row_ptr.push(0);
    for (k, &v) in voxels.iter().enumerate() {
        weights.for_each_neighbor(v, |nb, w| {
            diag[k] += w;
            match labels[nb] {
                SeedLabel::Unmarked => {
                    cols.push(unknown_of[nb].expect("unmarked voxel has an index"));
                    wts.push(w);
                }
                SeedLabel::Foreground => {
                    rhs_fg[k] += w;
                    touches_seed[k] = true;
                }
                SeedLabel::Background => {
                    rhs_bg[k] += w;
                    touches_seed[k] = true;
                }
            }
        });
        row_ptr.push(cols.len());
    }

    // Flag components that cannot reach any seed.
    let mut unreachable = vec![true; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&k| touches_seed[k]).collect();
    for &k in &queue {
        unreachable[k] = false;
    }
    while let Some(k) = queue.pop_front() {
        for &j in &cols[row_ptr[k]..row_ptr[k + 1]] {
            let j = j as usize;
            if unreachable[j] {
                unreachable[j] = false;
                queue.push_back(j);
            }
        }
    }

    Ok(Assembly::System(RwSystem {
        geom,
        voxels,
        unknown_of,
        diag,
        row_ptr,
        cols,
        weights: wts,
        rhs_fg,
        rhs_bg,
        unreachable,
    }))
}

/// Outcome of a conjugate-gradient solve.
#[derive(Clone, Debug)]
pub struct Solution {
    /// Probability of each unknown, clamped to [0, 1].
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl RwSystem {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// `y = A x`, with unreachable rows acting as the identity.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for k in 0..self.len() {
            if self.unreachable[k] {
                y[k] = x[k];
                continue;
            }
            let mut acc = self.diag[k] * x[k];
            for e in self.row_ptr[k]..self.row_ptr[k + 1] {
                acc -= self.weights[e] * x[self.cols[e] as usize];
            }
            y[k] = acc;
        }
    }

    fn rhs(&self, class: Class) -> Vec<f64> {
        let b = match class {
            Class::Foreground => &self.rhs_fg,
            Class::Background => &self.rhs_bg,
        };
        b.iter()
            .zip(&self.unreachable)
            .map(|(&v, &u)| if u { UNREACHABLE_PROBABILITY } else { v })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG on `L_U x = b` for the given class.
pub fn solve_rw(sys: &RwSystem, cfg: &RwConfig, class: Class) -> Result<Solution> {
    cfg.validate()?;
    let n = sys.len();
    let b = sys.rhs(class);
    let inv_diag: Vec<f64> = (0..n)
        .map(|k| if sys.unreachable[k] { 1.0 } else { 1.0 / sys.diag[k] })
        .collect();
    let mut x = vec![0.0; n];
    if b.iter().all(|&v| v == 0.0) {
        return Ok(Solution {
            x,
            iterations: 0,
            residual: 0.0,
        });
    }

    let mut r = b;
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let rz0 = rz;
    let max_iters = cfg.max_iters(n);
    let mut residual = 1.0;
    let mut iterations = 0;
    while residual > cfg.cg_tolerance {
        if iterations == max_iters {
            return Err(Error::NotConverged {
                iterations,
                residual,
            });
        }
        sys.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        iterations += 1;
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_next = dot(&r, &z);
        residual = (rz_next / rz0).sqrt();
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Solution {
        x,
        iterations,
        residual,
    })
}

/// Full-grid map: seeds at 1 / 0, unknowns from `x`.
pub fn scatter_solution(sys: &RwSystem, seeds: &Seeds, x: &[f64], class: Class) -> ProbMap3 {
    let (hit, miss) = match class {
        Class::Foreground => (SeedLabel::Foreground, SeedLabel::Background),
        Class::Background => (SeedLabel::Background, SeedLabel::Foreground),
    };
    let data = seeds
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| match l {
            l if l == hit => 1.0,
            l if l == miss => 0.0,
            _ => x[sys.unknown_of[i].expect("unmarked") as usize],
        })
        .collect();
    Grid3::from_parts(sys.geom, data)
}

fn seeds_as_prob(seeds: &Seeds) -> ProbMap3 {
    Grid3::from_parts(
        *seeds.geometry(),
        seeds
            .data()
            .iter()
            .map(|&l| (l == SeedLabel::Foreground) as u8 as f64)
            .collect(),
    )
}

/// Foreground probability of every voxel; seeds stay exactly 1 / 0.
pub fn random_walker_segment(crop: &Volume3, seeds: &Seeds, cfg: &RwConfig) -> Result<ProbMap3> {
    crop.geometry().check_same(seeds.geometry())?;
    let weights = edge_weights(crop, cfg)?;
    match assemble_system(&weights, seeds)? {
        Assembly::FullyMarked => Ok(seeds_as_prob(seeds)),
        Assembly::System(sys) => {
            let sol = solve_rw(&sys, cfg, Class::Foreground)?;
            Ok(scatter_solution(&sys, seeds, &sol.x, Class::Foreground))
        }
    }
}
