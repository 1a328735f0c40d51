//! On-disk layout of a run:
//!
//! ```text
//! run.json                   configuration and cases the run was made with
//! metrics.jsonl              one RoundMetrics per line
//! timings.jsonl              wall time per round
//! round_000/<case>.vvol      pseudo-labels after each round, crop space
//! round_001/params.json      model of each training round
//! round_001/complete         written last
//! final/<case>_prob.vvol     best-round pseudo-label, source space
//! final/<case>_mask.vvol     the same, thresholded at 0.5
//! final/summary.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::{CaseRecord, PipelineOutcome, RoundMetrics};
use crate::error::{Error, Result};
use crate::predictor::ModelParams;
use crate::volume::io::{load_prob, save_mask, save_prob};
use crate::volume::ProbMap3;

const METRICS: &str = "metrics.jsonl";
const TIMINGS: &str = "timings.jsonl";
const COMPLETE: &str = "complete";

pub fn round_dir(root: &Path, round: usize) -> PathBuf {
    root.join(format!("round_{round:03}"))
}

/// Reads every line of a metrics file.
pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

impl RunDir {
    /// Opens a run directory as is, for resuming.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// Opens a run directory and removes the outputs of any earlier run.
    pub fn fresh(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = Self::open(root)?;
        let entries = fs::read_dir(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let path = entry.path();
            if name.starts_with("round_") || name == "final" {
                fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            } else if name == METRICS || name == TIMINGS {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(METRICS)
    }

    pub fn write_run_info(&self, info: &impl Serialize) -> Result<()> {
        write_json(&self.root.join("run.json"), info)
    }

    pub(crate) fn commit_round(
        &self,
        metrics: &RoundMetrics,
        params: Option<&ModelParams>,
        train: &[CaseRecord],
        val: &[CaseRecord],
        seconds: f64,
    ) -> Result<()> {
        let dir = round_dir(&self.root, metrics.round);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for c in train.iter().chain(val) {
            save_prob(dir.join(format!("{}.vvol", c.id)), &c.pseudo)?;
        }
        if let Some(p) = params {
            write_json(&dir.join("params.json"), p)?;
        }
        append_line(&self.metrics_path(), metrics)?;
        append_line(
            &self.root.join(TIMINGS),
            &json!({ "round": metrics.round, "wall_seconds": seconds }),
        )?;
        let done = dir.join(COMPLETE);
        fs::write(&done, b"").map_err(|e| Error::io(&done, e))
    }

    /// Metrics and labels of the last completed round, dropping anything a
    /// crash left half-written after it.
    pub(crate) fn restore(&self) -> Result<Option<(Vec<RoundMetrics>, BTreeMap<String, ProbMap3>)>> {
        let path = self.metrics_path();
        if !path.exists() {
            return Ok(None);
        }
        let mut metrics = load_metrics(&path)?;
        while let Some(last) = metrics.last() {
            if round_dir(&self.root, last.round).join(COMPLETE).exists() {
                break;
            }
            metrics.pop();
        }
        for (k, m) in metrics.iter().enumerate() {
            if m.round != k {
                return Err(Error::invalid(format!(
                    "{} is out of order at line {}",
                    path.display(),
                    k + 1
                )));
            }
        }
        let Some(last) = metrics.last() else {
            return Ok(None);
        };
        let last_round = last.round;
        let dir = round_dir(&self.root, last_round);
        let mut labels = BTreeMap::new();
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.extension().is_some_and(|e| e == "raw") {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                labels.insert(id, load_prob(&p)?);
            }
        }
        // rewrite both logs so they end at the restored round
        let metrics_file = self.metrics_path();
        let _ = fs::remove_file(&metrics_file);
        for m in &metrics {
            append_line(&metrics_file, m)?;
        }
        let timings = self.root.join(TIMINGS);
        let kept: Vec<String> = fs::read_to_string(&timings)
            .unwrap_or_default()
            .lines()
            .take(metrics.len())
            .map(str::to_string)
            .collect();
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&timings, text).map_err(|e| Error::io(&timings, e))?;
        for stale in last_round + 1.. {
            let d = round_dir(&self.root, stale);
            if !d.exists() {
                break;
            }
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Some((metrics, labels)))
    }

    pub(crate) fn load_labels<'a>(
        &self,
        round: usize,
        ids: impl Iterator<Item = &'a str>,
    ) -> Result<BTreeMap<String, ProbMap3>> {
        let dir = round_dir(&self.root, round);
        ids.map(|id| Ok((id.to_string(), load_prob(dir.join(format!("{id}.vvol")))?)))
            .collect()
    }

    pub(crate) fn write_final(&self, outcome: &PipelineOutcome, cases: &[&CaseRecord]) -> Result<()> {
        let dir = self.root.join("final");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for c in cases {
            let label = &outcome.best_labels[&c.id];
            let source = super::map_back(label, &c.transform)?;
            save_prob(dir.join(format!("{}_prob.vvol", c.id)), &source)?;
            save_mask(dir.join(format!("{}_mask.vvol", c.id)), &source.threshold(0.5))?;
        }
        let best = &outcome.metrics[outcome.best_round];
        write_json(
            &dir.join("summary.json"),
            &json!({
                "best_round": outcome.best_round,
                "converged": outcome.converged,
                "rounds": outcome.metrics.len() - 1,
                "best_selection_score": best.selection_score(),
                "best_validation_mean": best.validation.mean,
                "initial_validation_mean": outcome.metrics[0].validation.mean,
            }),
        )
    }
}
