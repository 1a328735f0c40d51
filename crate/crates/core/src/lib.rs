//! Weakly supervised volumetric segmentation from six extreme-point clicks.
//!
//! The flow for one object is:
//!
//! 1. [`points`]: six clicks (or points simulated from a mask) give a padded
//!    bounding box, a fixed-size crop and a Gaussian point channel.
//! 2. [`scribbles`] + [`random_walker`]: geodesic paths between opposing
//!    points become foreground seeds, a wide dilation of them bounds the
//!    background, and the random walker turns the seeds into a pseudo-label.
//! 3. [`predictor`] + [`losses`]: a model is fit to the pseudo-labels under
//!    Dice plus point loss.
//! 4. [`regularizer`]: the random walker re-decides a band around the
//!    predicted boundary, giving the next round's pseudo-labels.
//!
//! [`pipeline`] iterates steps 2-4 and tracks per-round metrics.

pub mod error;
pub mod losses;
pub mod phantom;
pub mod pipeline;
pub mod points;
pub mod predictor;
pub mod random_walker;
pub mod regularizer;
pub mod scribbles;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, Grid3, Mask3, ProbMap3, Volume3};
