//! File exchange with an out-of-process predictor.
//!
//! Layout of the exchange directory:
//!
//! ```text
//! request.json            round, case list, training settings
//! <case>/image.vvol       crop intensities
//! <case>/pseudo.vvol      current pseudo-label
//! <case>/points.vvol      click channel
//! pred_<case>.vvol        written by the predictor
//! done.flag               written by the predictor once every prediction is in place
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{extract_features, predict, train_predictor, TrainCase, TrainConfig};
use crate::error::{Error, Result};
use crate::points::PointChannel;
use crate::volume::io::{load_intensity, load_prob, save_prob, save_volume};
use crate::volume::{ProbMap3, Volume3};

pub const REQUEST_FILE: &str = "request.json";
pub const DONE_FLAG: &str = "done.flag";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeCase {
    pub id: String,
    pub dims: [usize; 3],
    /// Whether the predictor may train on this case.
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub round: usize,
    pub cases: Vec<ExchangeCase>,
    pub train: TrainConfig,
    pub use_point_channel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalConfig {
    pub dir: PathBuf,
    pub poll_interval_ms: u64,
    pub timeout_secs: f64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("exchange"),
            poll_interval_ms: 100,
            timeout_secs: 600.0,
        }
    }
}

/// One case handed to the predictor.
#[derive(Clone, Copy, Debug)]
pub struct ExchangeInput<'a> {
    pub id: &'a str,
    pub image: &'a Volume3,
    pub pseudo: &'a ProbMap3,
    pub points: &'a PointChannel,
    pub train: bool,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("case id {id:?} is not a plain file name")))
    }
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("pred_{id}.vvol"))
}

fn case_file(dir: &Path, id: &str, name: &str) -> PathBuf {
    dir.join(id).join(format!("{name}.vvol"))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// Clears the answers of any previous round, writes the case volumes, then
/// the request file.
pub fn write_request(
    dir: &Path,
    round: usize,
    inputs: &[ExchangeInput],
    train: &TrainConfig,
    use_point_channel: bool,
) -> Result<ExchangeRequest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    remove_if_present(&dir.join(DONE_FLAG))?;
    remove_if_present(&dir.join(REQUEST_FILE))?;
    let mut cases = Vec::with_capacity(inputs.len());
    for input in inputs {
        check_id(input.id)?;
        let geom = input.image.geometry();
        geom.check_same(input.pseudo.geometry())?;
        geom.check_same(input.points.map.geometry())?;
        let pred = prediction_path(dir, input.id);
        remove_if_present(&pred.with_extension("json"))?;
        remove_if_present(&pred.with_extension("raw"))?;
        save_volume(case_file(dir, input.id, "image"), input.image)?;
        save_prob(case_file(dir, input.id, "pseudo"), input.pseudo)?;
        save_prob(case_file(dir, input.id, "points"), &input.points.map)?;
        cases.push(ExchangeCase {
            id: input.id.to_string(),
            dims: geom.dims,
            train: input.train,
        });
    }
    let request = ExchangeRequest {
        round,
        cases,
        train: train.clone(),
        use_point_channel,
    };
    let tmp = dir.join(format!("{REQUEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&request)?).map_err(|e| Error::io(&tmp, e))?;
    let target = dir.join(REQUEST_FILE);
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(request)
}

/// Polls for the done flag, then loads and validates every prediction.
pub fn await_predictions(
    dir: &Path,
    request: &ExchangeRequest,
    poll: Duration,
    timeout: Duration,
) -> Result<Vec<ProbMap3>> {
    let start = Instant::now();
    let flag = dir.join(DONE_FLAG);
    while !flag.exists() {
        if start.elapsed() >= timeout {
            return Err(Error::Timeout(timeout));
        }
        std::thread::sleep(poll.min(timeout.saturating_sub(start.elapsed())));
    }
    request
        .cases
        .iter()
        .map(|c| {
            let p = load_prob(prediction_path(dir, &c.id))?;
            if p.dims() != c.dims {
                return Err(Error::DimsMismatch {
                    left: p.dims(),
                    right: c.dims,
                });
            }
            Ok(p)
        })
        .collect()
}

/// Hands the cases to an external predictor and waits for its answers.
pub fn external_predictor_roundtrip(
    cfg: &ExternalConfig,
    round: usize,
    inputs: &[ExchangeInput],
    train: &TrainConfig,
    use_point_channel: bool,
) -> Result<Vec<ProbMap3>> {
    let request = write_request(&cfg.dir, round, inputs, train, use_point_channel)?;
    if !(cfg.timeout_secs.is_finite() && cfg.timeout_secs >= 0.0) {
        return Err(Error::invalid("timeout must be a finite number of seconds"));
    }
    await_predictions(
        &cfg.dir,
        &request,
        Duration::from_millis(cfg.poll_interval_ms.max(1)),
        Duration::from_secs_f64(cfg.timeout_secs),
    )
}

/// Case volumes as read back from the exchange directory.
#[derive(Clone, Debug)]
pub struct ExchangeCaseData {
    pub case: ExchangeCase,
    pub image: Volume3,
    pub pseudo: ProbMap3,
    pub points: PointChannel,
}

pub fn read_request(dir: &Path) -> Result<(ExchangeRequest, Vec<ExchangeCaseData>)> {
    let path = dir.join(REQUEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let request: ExchangeRequest = serde_json::from_slice(&text)?;
    let cases = request
        .cases
        .iter()
        .map(|c| {
            check_id(&c.id)?;
            let image = load_intensity(case_file(dir, &c.id, "image"))?;
            let pseudo = load_prob(case_file(dir, &c.id, "pseudo"))?;
            let map = load_prob(case_file(dir, &c.id, "points"))?;
            image.geometry().check_same(pseudo.geometry())?;
            image.geometry().check_same(map.geometry())?;
            Ok(ExchangeCaseData {
                case: c.clone(),
                image,
                pseudo,
                points: PointChannel { map, sigma: 0.0 },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((request, cases))
}

/// Serves one request with the built-in model: train on the cases marked for
/// training, predict every case, write the answers and the done flag.
pub fn respond_with_reference(dir: &Path) -> Result<()> {
    let (request, cases) = read_request(dir)?;
    let predictions = reference_predictions(&request, &cases)?;
    for (c, p) in cases.iter().zip(&predictions) {
        save_prob(prediction_path(dir, &c.case.id), p)?;
    }
    let flag = dir.join(DONE_FLAG);
    fs::write(&flag, b"").map_err(|e| Error::io(&flag, e))
}

/// Predictions the built-in model gives for a request.
pub fn reference_predictions(
    request: &ExchangeRequest,
    cases: &[ExchangeCaseData],
) -> Result<Vec<ProbMap3>> {
    let feats = cases
        .iter()
        .map(|c| extract_features(&c.image, request.use_point_channel.then_some(&c.points)))
        .collect::<Result<Vec<_>>>()?;
    let train: Vec<TrainCase> = cases
        .iter()
        .zip(&feats)
        .filter(|(c, _)| c.case.train)
        .map(|(c, f)| TrainCase {
            features: f,
            target: &c.pseudo,
            points: &c.points,
        })
        .collect();
    let params = train_predictor(&train, &request.train)?;
    feats.iter().map(|f| predict(&params, f)).collect()
}
