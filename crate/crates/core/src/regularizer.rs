//! Re-solves the random walker in a band around a predicted boundary.
//!
//! Voxels deep inside the predicted foreground or background stay fixed as
//! seeds; the band between the eroded classes is left for the walker.

use crate::error::Result;
use crate::random_walker::{random_walker_segment, RwConfig};
use crate::scribbles::{SeedLabel, Seeds};
use crate::volume::{dilate_ball, erode_ball, Grid3, Mask3, ProbMap3, Volume3};

/// Erosion radius of both classes, in voxels.
pub const DEFAULT_BAND_RADIUS: usize = 4;

/// Foreground `p >= 0.5` and background eroded by `radius`. Space beyond
/// the crop counts as background, so the background erosion is the
/// complement of the dilated foreground. A class that erodes away entirely
/// keeps its un-eroded voxels.
pub fn uncertainty_seeds(p: &ProbMap3, radius: usize) -> Seeds {
    let fg_all = p.threshold(0.5);
    let bg_all = fg_all.complement();
    let or_all = |e: Mask3, all: &Mask3| if e.count() == 0 { all.clone() } else { e };
    let fg = or_all(erode_ball(&fg_all, radius), &fg_all);
    let bg = or_all(dilate_ball(&fg_all, radius).complement(), &bg_all);
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
    Grid3::new(*p.geometry(), labels).expect("labels match the map")
}

/// Random walker over the uncertainty band of `p`; voxels outside the band
/// come back hardened to 0 or 1.
pub fn rw_regularize(crop: &Volume3, p: &ProbMap3, radius: usize, cfg: &RwConfig) -> Result<ProbMap3> {
    crop.geometry().check_same(p.geometry())?;
    let seeds = uncertainty_seeds(p, radius);
    let fg = seeds.count_label(SeedLabel::Foreground);
    let bg = seeds.count_label(SeedLabel::Background);
    if fg == 0 || bg == 0 {
        // one class covers the crop; nothing to solve
        return Ok(ProbMap3::from(&p.threshold(0.5)));
    }
    random_walker_segment(crop, &seeds, cfg)
}
