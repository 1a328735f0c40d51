use std::sync::Arc;

use serde::Serialize;
use xseg_core::pipeline::{CaseRecord, PipelineConfig};
use xseg_core::points::ExtremePoints;
use xseg_core::{ProbMap3, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Segment,
    Refine,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobState {
    Idle,
    Running { kind: JobKind },
    Failed { message: String },
}

/// One annotation session. Every mutation goes through [`Session::touch`].
pub struct Session {
    pub volume: Arc<Volume3>,
    pub config: PipelineConfig,
    pub points: Option<ExtremePoints>,
    /// Set once a segmentation has finished.
    pub record: Option<CaseRecord>,
    /// Current probability on the source grid.
    pub prob: Option<ProbMap3>,
    pub job: JobState,
    pub round: Option<usize>,
    pub last_dice: Option<f64>,
    revision: u64,
}

impl Session {
    pub fn new(volume: Volume3, config: PipelineConfig) -> Self {
        Self {
            volume: Arc::new(volume),
            config,
            points: None,
            record: None,
            prob: None,
            job: JobState::Idle,
            round: None,
            last_dice: None,
            revision: 0,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn touch(&mut self) {
        self.revision += 1;
    }

    pub fn is_busy(&self) -> bool {
        matches!(self.job, JobState::Running { .. })
    }
}

#[derive(Debug, Serialize)]
pub struct Status {
    pub revision: u64,
    pub job: JobState,
    pub round: Option<usize>,
    /// Dice of the last prediction against the pseudo-label it was trained on.
    pub last_dice: Option<f64>,
    pub has_points: bool,
    pub has_probability: bool,
}

impl From<&Session> for Status {
    fn from(s: &Session) -> Self {
        Self {
            revision: s.revision,
            job: s.job.clone(),
            round: s.round,
            last_dice: s.last_dice,
            has_points: s.points.is_some(),
            has_probability: s.prob.is_some(),
        }
    }
}
