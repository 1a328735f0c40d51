//! JSON run manifests: a configuration plus the list of cases.
//!
//! ```json
//! {
//!   "config": { "max_rounds": 5, "seed": 7 },
//!   "cases": [
//!     { "id": "a", "role": "train", "phantom": { "rng_seed": 1 } },
//!     { "id": "b", "role": "val", "image": "b.vvol", "truth": "b_gt.vvol" },
//!     { "id": "c", "image": "c.vvol", "points": "c_points.json" }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Clicks come from
//! `points` when given (a points file path or an inline point set), otherwise
//! they are simulated from the truth mask.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{initialize_case, CaseRecord, GroundTruth, PipelineConfig, PointSource};
use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::points::{ExtremePoints, PointsFile};
use crate::volume::io::{load_intensity, load_mask};
use crate::volume::{Mask3, Volume3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointsRef {
    File(PathBuf),
    Wire(PointsFile),
    Inline(ExtremePoints),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    #[serde(default)]
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PointsRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub config: PipelineConfig,
    pub cases: Vec<CaseEntry>,
}

/// Initialized cases split by role, with their evaluation masks.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub truth: GroundTruth,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_points(path: impl AsRef<Path>) -> Result<ExtremePoints> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice::<PointsFile>(&text)?.into_points()
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !self.cases.iter().any(|c| c.role == Role::Train) {
            return Err(Error::invalid("manifest has no train case"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.cases {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::invalid(format!("duplicate case id {:?}", c.id)));
            }
            let ok = !c.id.is_empty()
                && c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || matches!(ch, '_' | '-'));
            if !ok {
                return Err(Error::invalid(format!(
                    "case id {:?} must be non-empty ASCII letters, digits, '_' or '-'",
                    c.id
                )));
            }
            match (&c.phantom, &c.image) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "case {:?} needs exactly one of \"phantom\" or \"image\"",
                        c.id
                    )))
                }
            }
            if c.phantom.is_some() && c.truth.is_some() {
                return Err(Error::invalid(format!(
                    "case {:?}: a phantom brings its own truth",
                    c.id
                )));
            }
            if c.points.is_none() && c.phantom.is_none() && c.truth.is_none() {
                return Err(Error::invalid(format!(
                    "case {:?} has neither points nor a truth mask to simulate them from",
                    c.id
                )));
            }
        }
        Ok(())
    }

    fn load_case(&self, base: &Path, c: &CaseEntry) -> Result<(Volume3, Option<Mask3>, Option<ExtremePoints>)> {
        let (image, truth) = match (&c.phantom, &c.image) {
            (Some(spec), _) => {
                let (v, m) = generate_phantom(spec)?;
                (v, Some(m))
            }
            (None, Some(path)) => {
                let v = load_intensity(resolve(base, path))?;
                let m = c.truth.as_ref().map(|t| load_mask(resolve(base, t))).transpose()?;
                (v, m)
            }
            (None, None) => unreachable!("validated"),
        };
        let points = match &c.points {
            None => None,
            Some(PointsRef::File(p)) => Some(read_points(resolve(base, p))?),
            Some(PointsRef::Wire(w)) => Some(w.clone().into_points()?),
            Some(PointsRef::Inline(e)) => Some(*e),
        };
        Ok((image, truth, points))
    }

    /// Loads every case and runs its initialization.
    pub fn prepare(&self, base: &Path) -> Result<PreparedRun> {
        self.prepare_with(base, &self.config)
    }

    pub fn prepare_with(&self, base: &Path, cfg: &PipelineConfig) -> Result<PreparedRun> {
        let mut run = PreparedRun {
            train: Vec::new(),
            val: Vec::new(),
            truth: GroundTruth::default(),
        };
        for (k, c) in self.cases.iter().enumerate() {
            let (image, truth, points) = self.load_case(base, c)?;
            let source = match (&points, &truth) {
                (Some(e), _) => PointSource::Clicks(e),
                (None, Some(m)) => PointSource::Mask(m),
                (None, None) => unreachable!("validated"),
            };
            let record = initialize_case(&c.id, image, source, cfg, k)?;
            if let Some(m) = truth {
                run.truth.insert(&c.id, m);
            }
            match c.role {
                Role::Train => run.train.push(record),
                Role::Val => run.val.push(record),
            }
        }
        Ok(run)
    }
}
