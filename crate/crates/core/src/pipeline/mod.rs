//! Initialization from clicks and the train / predict / regularize rounds.
//!
//! Ground truth lives in [`GroundTruth`] and is only ever read by the metric
//! code; training, prediction and regularization see [`CaseRecord`]s alone.

mod checkpoint;
pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_metrics, round_dir, RunDir};

use crate::error::{Error, Result};
use crate::losses::{boundary_enhance, dice_score};
use crate::points::{
    compute_bbox, crop_resize, extract_extreme_points, jitter_points, map_back, point_channel,
    CropTransform, ExtremePoints, PointChannel,
};
use crate::predictor::external::{external_predictor_roundtrip, ExchangeInput, ExternalConfig};
use crate::predictor::{extract_features, predict, train_predictor, ModelParams, TrainCase, TrainConfig};
use crate::random_walker::{random_walker_segment, RwConfig};
use crate::regularizer::{rw_regularize, uncertainty_seeds, DEFAULT_BAND_RADIUS};
use crate::scribbles::{background_radius, seeds_from_points, SeedLabel, FOREGROUND_RADIUS};
use crate::volume::{Mask3, ProbMap3, Volume3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Training rounds after initialization.
    pub max_rounds: usize,
    pub convergence_window: usize,
    pub convergence_epsilon: f64,
    pub crop_side: usize,
    pub pad_mm: f64,
    /// Point-channel Gaussian width, crop voxels.
    pub point_sigma: f64,
    /// Click jitter when points are simulated from masks, source voxels.
    pub jitter_sigma: f64,
    pub fg_radius: usize,
    /// `None` scales with the crop side.
    pub bg_radius: Option<usize>,
    pub band_radius: usize,
    pub rw_regularization: bool,
    pub point_channel: bool,
    pub rw: RwConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Hand prediction to an external process instead of the built-in model.
    pub external: Option<ExternalConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_rounds: 20,
            convergence_window: 3,
            convergence_epsilon: 1e-3,
            crop_side: 64,
            pad_mm: 20.0,
            point_sigma: 2.0,
            jitter_sigma: 1.0,
            fg_radius: FOREGROUND_RADIUS,
            bg_radius: None,
            band_radius: DEFAULT_BAND_RADIUS,
            rw_regularization: true,
            point_channel: true,
            rw: RwConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            external: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds must be >= 1"));
        }
        if self.convergence_window == 0 {
            return Err(Error::invalid("convergence_window must be >= 1"));
        }
        if self.crop_side < 8 {
            return Err(Error::invalid(format!(
                "crop side must be >= 8, got {}",
                self.crop_side
            )));
        }
        if !(self.point_sigma.is_finite() && self.point_sigma > 0.0) {
            return Err(Error::invalid("point_sigma must be > 0"));
        }
        self.rw.validate()?;
        self.train.validate()
    }

    pub fn background_radius(&self) -> usize {
        self.bg_radius.unwrap_or_else(|| background_radius(self.crop_side))
    }

    pub fn variant(&self) -> Variant {
        Variant {
            rw_regularization: self.rw_regularization,
            point_channel: self.point_channel,
            alpha: self.train.loss.alpha,
        }
    }
}

/// The ablation switches a run was made with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub rw_regularization: bool,
    pub point_channel: bool,
    pub alpha: f64,
}

/// Stream of independent seeds: `seed` mixed with a purpose tag and index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const JITTER_TAG: u64 = 1;
const TRAIN_TAG: u64 = 2;

/// Everything the rounds need about one case. Holds no ground truth.
#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub id: String,
    pub volume: Volume3,
    /// Clicks in source voxel coordinates.
    pub points: ExtremePoints,
    pub transform: CropTransform,
    pub crop: Volume3,
    /// Clicks in crop coordinates.
    pub crop_points: ExtremePoints,
    pub channel: PointChannel,
    /// Current pseudo-label, crop space.
    pub pseudo: ProbMap3,
}

impl CaseRecord {
    /// Current pseudo-label resampled onto the source volume.
    pub fn pseudo_in_source(&self) -> Result<ProbMap3> {
        map_back(&self.pseudo, &self.transform)
    }
}

/// Where the clicks of a case come from.
#[derive(Clone, Copy, Debug)]
pub enum PointSource<'a> {
    /// Clicked by a user, source voxel coordinates.
    Clicks(&'a ExtremePoints),
    /// Simulated from a mask, then jittered with the configured sigma.
    Mask(&'a Mask3),
}

/// Clicks, box, crop, point channel, scribbles and the random walker.
pub fn initialize_case(
    id: &str,
    volume: Volume3,
    source: PointSource,
    cfg: &PipelineConfig,
    case_index: usize,
) -> Result<CaseRecord> {
    let geom = *volume.geometry();
    let points = match source {
        PointSource::Clicks(e) => {
            e.validate(geom.dims)?;
            *e
        }
        PointSource::Mask(m) => {
            geom.check_same(m.geometry())?;
            let exact = extract_extreme_points(m)?;
            let seed = derive_seed(cfg.seed, JITTER_TAG, case_index as u64);
            jitter_points(&exact, cfg.jitter_sigma, seed, geom.dims)?
        }
    };
    let bbox = compute_bbox(&points, geom, cfg.pad_mm)?;
    let (crop, transform) = crop_resize(&volume, &bbox, cfg.crop_side)?;
    let crop_points = transform.points_to_crop(&points);
    let mut channel = point_channel(&crop_points, *crop.geometry(), cfg.point_sigma)?;
    channel.map = channel.map.quantize_f32();
    let seeds = seeds_from_points(&crop, &crop_points, cfg.fg_radius, cfg.background_radius())?;
    let pseudo = random_walker_segment(&crop, &seeds, &cfg.rw)?.quantize_f32();
    Ok(CaseRecord {
        id: id.to_string(),
        volume,
        points,
        transform,
        crop,
        crop_points,
        channel,
        pseudo,
    })
}

/// Evaluation masks by case id, in source space.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    masks: BTreeMap<String, Mask3>,
}

impl GroundTruth {
    pub fn insert(&mut self, id: &str, mask: Mask3) {
        self.masks.insert(id.to_string(), mask);
    }

    pub fn get(&self, id: &str) -> Option<&Mask3> {
        self.masks.get(id)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub id: String,
    pub value: f64,
}

/// Per-case values with their mean, population std and median.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub cases: Vec<CaseScore>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
}

impl Scores {
    pub fn new(cases: Vec<CaseScore>) -> Self {
        if cases.is_empty() {
            return Self::default();
        }
        let n = cases.len() as f64;
        let mean = cases.iter().map(|c| c.value).sum::<f64>() / n;
        let var = cases.iter().map(|c| (c.value - mean).powi(2)).sum::<f64>() / n;
        let mut sorted: Vec<f64> = cases.iter().map(|c| c.value).collect();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
        };
        Self {
            cases,
            mean: Some(mean),
            std: Some(var.sqrt()),
            median: Some(median),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub variant: Variant,
    /// Dice of each train prediction against the pseudo-label it was
    /// trained on. Empty at round 0.
    pub train_fit: Scores,
    /// Dice of train pseudo-labels against ground truth, where known.
    pub train_truth: Scores,
    /// Dice of validation pseudo-labels against ground truth.
    pub validation: Scores,
    /// Dice of raw validation predictions against ground truth.
    pub validation_prediction: Scores,
    /// Mean boundary map of each prediction at its six clicks.
    pub click_boundary: Scores,
    /// Voxels handed to the random walker during regularization.
    pub band_voxels: usize,
    pub final_loss: Option<f64>,
}

impl RoundMetrics {
    /// The number rounds are ranked by: validation Dice when ground truth
    /// exists, otherwise the fit to the pseudo-labels.
    pub fn selection_score(&self) -> Option<f64> {
        self.validation.mean.or(self.train_fit.mean)
    }
}

fn dice_vs_truth(cases: &[CaseRecord], truth: &GroundTruth, maps: Option<&[ProbMap3]>) -> Result<Scores> {
    let mut out = Vec::new();
    for (k, c) in cases.iter().enumerate() {
        let Some(gt) = truth.get(&c.id) else { continue };
        let source = match maps {
            Some(m) => map_back(&m[k], &c.transform)?,
            None => c.pseudo_in_source()?,
        };
        out.push(CaseScore {
            id: c.id.clone(),
            value: dice_score(&source.threshold(0.5), gt)?,
        });
    }
    Ok(Scores::new(out))
}

/// Metrics of freshly initialized cases.
pub fn initial_metrics(
    train: &[CaseRecord],
    val: &[CaseRecord],
    truth: &GroundTruth,
    cfg: &PipelineConfig,
) -> Result<RoundMetrics> {
    let validation = dice_vs_truth(val, truth, None)?;
    Ok(RoundMetrics {
        round: 0,
        variant: cfg.variant(),
        train_fit: Scores::default(),
        train_truth: dice_vs_truth(train, truth, None)?,
        validation_prediction: validation.clone(),
        validation,
        click_boundary: Scores::default(),
        band_voxels: 0,
        final_loss: None,
    })
}

/// Mean of the boundary map of `p` at the rounded clicks.
pub fn click_boundary(p: &ProbMap3, clicks: &ExtremePoints, cfg: &TrainConfig) -> f64 {
    let map = boundary_enhance(p, &cfg.loss);
    let pts = clicks.rounded();
    pts.iter().map(|c| map.get(c[0], c[1], c[2])).sum::<f64>() / pts.len() as f64
}

/// Training settings of one round: the run's, with a seed of its own.
pub fn train_config_for_round(cfg: &PipelineConfig, round: usize) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, TRAIN_TAG, round as u64),
        ..cfg.train.clone()
    }
}

fn in_process_predictions(
    all: &[&CaseRecord],
    n_train: usize,
    cfg: &PipelineConfig,
    train_cfg: &TrainConfig,
) -> Result<(Vec<ProbMap3>, ModelParams)> {
    let feats = all
        .iter()
        .map(|c| extract_features(&c.crop, cfg.point_channel.then_some(&c.channel)))
        .collect::<Result<Vec<_>>>()?;
    let cases: Vec<TrainCase> = all[..n_train]
        .iter()
        .zip(&feats)
        .map(|(c, f)| TrainCase {
            features: f,
            target: &c.pseudo,
            points: &c.channel,
        })
        .collect();
    let params = train_predictor(&cases, train_cfg)?;
    let preds = feats
        .iter()
        .map(|f| predict(&params, f))
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, params))
}

/// Products of one round besides its metrics.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub metrics: RoundMetrics,
    /// `None` when an external process made the predictions.
    pub params: Option<ModelParams>,
    pub predictions: Vec<ProbMap3>,
}

/// Train on the train cases' pseudo-labels, predict every case, regularize
/// and replace the pseudo-labels. Nothing is replaced if any step fails.
pub fn run_round(
    train: &mut [CaseRecord],
    val: &mut [CaseRecord],
    truth: &GroundTruth,
    cfg: &PipelineConfig,
    round: usize,
) -> Result<RoundOutput> {
    if train.is_empty() {
        return Err(Error::invalid("a round needs at least one train case"));
    }
    let train_cfg = train_config_for_round(cfg, round);
    let all: Vec<&CaseRecord> = train.iter().chain(val.iter()).collect();
    let (predictions, params) = match &cfg.external {
        None => {
            let (p, m) = in_process_predictions(&all, train.len(), cfg, &train_cfg)?;
            (p, Some(m))
        }
        Some(ext) => {
            let inputs: Vec<ExchangeInput> = all
                .iter()
                .enumerate()
                .map(|(k, c)| ExchangeInput {
                    id: &c.id,
                    image: &c.crop,
                    pseudo: &c.pseudo,
                    points: &c.channel,
                    train: k < train.len(),
                })
                .collect();
            let p = external_predictor_roundtrip(ext, round, &inputs, &train_cfg, cfg.point_channel)?;
            (p, None)
        }
    };
    let predictions: Vec<ProbMap3> = predictions.iter().map(|p| p.quantize_f32()).collect();

    let mut next = Vec::with_capacity(all.len());
    let mut band_voxels = 0;
    for (c, p) in all.iter().zip(&predictions) {
        let label = if cfg.rw_regularization {
            band_voxels += uncertainty_seeds(p, cfg.band_radius).count_label(SeedLabel::Unmarked);
            rw_regularize(&c.crop, p, cfg.band_radius, &cfg.rw)?
        } else {
            ProbMap3::from(&p.threshold(0.5))
        };
        next.push(label.quantize_f32());
    }

    let mut fit = Vec::with_capacity(train.len());
    for (c, p) in train.iter().zip(&predictions) {
        fit.push(CaseScore {
            id: c.id.clone(),
            value: dice_score(&p.threshold(0.5), &c.pseudo.threshold(0.5))?,
        });
    }
    let clicks = all
        .iter()
        .zip(&predictions)
        .map(|(c, p)| CaseScore {
            id: c.id.clone(),
            value: click_boundary(p, &c.crop_points, &train_cfg),
        })
        .collect();
    let validation_prediction = dice_vs_truth(val, truth, Some(&predictions[train.len()..]))?;

    let mut next = next.into_iter();
    for c in train.iter_mut().chain(val.iter_mut()) {
        c.pseudo = next.next().expect("one label per case");
    }
    let metrics = RoundMetrics {
        round,
        variant: cfg.variant(),
        train_fit: Scores::new(fit),
        train_truth: dice_vs_truth(train, truth, None)?,
        validation: dice_vs_truth(val, truth, None)?,
        validation_prediction,
        click_boundary: Scores::new(clicks),
        band_voxels,
        final_loss: params.as_ref().and_then(|p| p.final_loss),
    };
    Ok(RoundOutput {
        metrics,
        params,
        predictions,
    })
}

/// True once the last `window` rounds improved the score by less than
/// `epsilon` over the round before them.
pub fn converged(scores: &[f64], window: usize, epsilon: f64) -> bool {
    if scores.len() <= window {
        return false;
    }
    let base = scores[scores.len() - window - 1];
    let best = scores[scores.len() - window..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    best - base < epsilon
}

/// Index of the highest score; the earliest wins ties.
pub fn best_round(metrics: &[RoundMetrics]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for m in metrics {
        if let Some(s) = m.selection_score() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((m.round, s));
            }
        }
    }
    best.map(|(r, _)| r)
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// Round 0 (initialization) first, then one entry per training round.
    pub metrics: Vec<RoundMetrics>,
    pub best_round: usize,
    /// Pseudo-labels of the best round, crop space, by case id.
    pub best_labels: BTreeMap<String, ProbMap3>,
    pub converged: bool,
    /// Wall time per round in seconds, parallel to `metrics`.
    pub wall_seconds: Vec<f64>,
}

impl PipelineOutcome {
    /// Training rounds only.
    pub fn rounds(&self) -> &[RoundMetrics] {
        &self.metrics[1..]
    }
}

fn labels_of(train: &[CaseRecord], val: &[CaseRecord]) -> BTreeMap<String, ProbMap3> {
    train
        .iter()
        .chain(val)
        .map(|c| (c.id.clone(), c.pseudo.clone()))
        .collect()
}

/// Rounds until convergence or `max_rounds`. With a run directory every
/// round is checkpointed, and `resume` picks up after the last finished one.
pub fn run_pipeline(
    mut train: Vec<CaseRecord>,
    mut val: Vec<CaseRecord>,
    truth: &GroundTruth,
    cfg: &PipelineConfig,
    run_dir: Option<&RunDir>,
    resume: bool,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("the pipeline needs at least one train case"));
    }
    let mut metrics = Vec::new();
    let mut wall = Vec::new();
    if resume {
        let dir = run_dir.ok_or_else(|| Error::invalid("resuming needs a run directory"))?;
        if let Some((m, labels)) = dir.restore()? {
            for c in train.iter_mut().chain(val.iter_mut()) {
                c.pseudo = labels
                    .get(&c.id)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks case {}", c.id)))?;
            }
            wall = vec![0.0; m.len()];
            metrics = m;
        }
    }
    if metrics.is_empty() {
        let start = Instant::now();
        let m = initial_metrics(&train, &val, truth, cfg)?;
        if let Some(dir) = run_dir {
            dir.commit_round(&m, None, &train, &val, start.elapsed().as_secs_f64())?;
        }
        metrics.push(m);
        wall.push(start.elapsed().as_secs_f64());
    }
    let mut best = best_round(&metrics).unwrap_or(0);
    let mut best_labels = if resume {
        match run_dir {
            Some(dir) => dir.load_labels(best, train.iter().chain(&val).map(|c| c.id.as_str()))?,
            None => labels_of(&train, &val),
        }
    } else {
        labels_of(&train, &val)
    };
    let mut scores: Vec<f64> = metrics.iter().filter_map(|m| m.selection_score()).collect();
    let mut done = converged(&scores, cfg.convergence_window, cfg.convergence_epsilon);
    let mut round = metrics.len();
    while !done && round <= cfg.max_rounds {
        let start = Instant::now();
        let out = run_round(&mut train, &mut val, truth, cfg, round)?;
        let secs = start.elapsed().as_secs_f64();
        if let Some(dir) = run_dir {
            dir.commit_round(&out.metrics, out.params.as_ref(), &train, &val, secs)?;
        }
        if let Some(s) = out.metrics.selection_score() {
            scores.push(s);
        }
        metrics.push(out.metrics);
        wall.push(secs);
        let b = best_round(&metrics).unwrap_or(0);
        if b == round {
            best_labels = labels_of(&train, &val);
        }
        best = b;
        done = converged(&scores, cfg.convergence_window, cfg.convergence_epsilon);
        round += 1;
    }
    let outcome = PipelineOutcome {
        metrics,
        best_round: best,
        best_labels,
        converged: done,
        wall_seconds: wall,
    };
    if let Some(dir) = run_dir {
        let cases: Vec<&CaseRecord> = train.iter().chain(&val).collect();
        dir.write_final(&outcome, &cases)?;
    }
    Ok(outcome)
}

/// Default location of a run's outputs next to its manifest.
pub fn default_output_dir(manifest: &Path) -> PathBuf {
    manifest.with_extension("out")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_window() {
        assert!(!converged(&[0.5, 0.6], 3, 1e-3));
        assert!(!converged(&[0.5, 0.6, 0.7, 0.8], 3, 1e-3));
        assert!(converged(&[0.8, 0.8, 0.8005, 0.7], 3, 1e-3));
        assert!(!converged(&[0.8, 0.8, 0.8005, 0.802], 3, 1e-3));
        assert!(converged(&[0.9, 0.5], 1, 1e-3));
    }

    #[test]
    fn scores_summaries() {
        let s = Scores::new(
            [0.2, 0.9, 0.4, 0.5]
                .iter()
                .enumerate()
                .map(|(i, &v)| CaseScore { id: i.to_string(), value: v })
                .collect(),
        );
        assert_eq!(s.median, Some(0.45));
        assert!((s.mean.unwrap() - 0.5).abs() < 1e-15);
        assert!((s.std.unwrap() - 0.065f64.sqrt()).abs() < 1e-12);
        assert_eq!(Scores::new(vec![]).mean, None);
    }

    #[test]
    fn seeds_differ_by_tag_and_index() {
        let a = derive_seed(5, 1, 0);
        assert_ne!(a, derive_seed(5, 1, 1));
        assert_ne!(a, derive_seed(5, 2, 0));
        assert_ne!(a, derive_seed(6, 1, 0));
        assert_eq!(a, derive_seed(5, 1, 0));
    }

    #[test]
    fn config_checks() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert!(PipelineConfig { max_rounds: 0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { crop_side: 4, ..Default::default() }.validate().is_err());
        assert_eq!(PipelineConfig::default().background_radius(), 15);
    }
}
