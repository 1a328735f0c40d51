//! A per-voxel network over handcrafted features, trained on pseudo-labels
//! with the combined Dice and point objective.
//!
//! The model is a single hidden `tanh` layer followed by a sigmoid output.
//! Training uses the whole crop per step, since the point loss filters the
//! full prediction map.

pub mod external;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::points::PointChannel;
use crate::volume::{gaussian_smooth, gradient_magnitude, Geometry, Grid3, ProbMap3, Volume3};

/// Intensity, three smoothing scales, gradient magnitude, point channel and
/// normalized x, y, z.
pub const FEATURE_COUNT: usize = 9;
/// Column holding the point channel.
pub const POINT_FEATURE: usize = 5;
const SMOOTHING_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];
const STD_FLOOR: f64 = 1e-6;
/// Predictions are kept this far from 0 and 1.
const OUTPUT_MARGIN: f64 = 1e-12;

/// Per-voxel features, stored voxel-major (`FEATURE_COUNT` values per voxel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    geom: Geometry,
    values: Vec<f64>,
}

impl FeatureStack {
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn len(&self) -> usize {
        self.geom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geom.is_empty()
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        &self.values[idx * FEATURE_COUNT..(idx + 1) * FEATURE_COUNT]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(FEATURE_COUNT).copied().collect()
    }

    /// Rebuilds a stack from voxel-major values.
    pub fn from_values(geom: Geometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.len() * FEATURE_COUNT {
            return Err(Error::SizeMismatch {
                expected: geom.len() * FEATURE_COUNT,
                actual: values.len(),
            });
        }
        if let Some((index, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidValue {
                kind: "feature",
                value: v,
                index,
            });
        }
        Ok(Self { geom, values })
    }
}

fn standardize(v: &Volume3) -> Volume3 {
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data()
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(STD_FLOOR);
    Grid3::new(
        *v.geometry(),
        v.data()
            .iter()
            .map(|&x| ((x as f64 - mean) / sd) as f32)
            .collect(),
    )
    .expect("standardized intensities are finite")
}

/// Builds the feature stack of a crop. The crop is z-scored first; the
/// smoothed and gradient features are computed from the z-scored crop.
/// Without a point channel that column is zero.
pub fn extract_features(crop: &Volume3, pts: Option<&PointChannel>) -> Result<FeatureStack> {
    let geom = *crop.geometry();
    if let Some(p) = pts {
        geom.check_same(p.map.geometry())?;
    }
    let z = standardize(crop);
    let mut columns: Vec<Vec<f64>> = vec![z.data().iter().map(|&x| x as f64).collect()];
    for sigma in SMOOTHING_SIGMAS {
        let s = gaussian_smooth(&z, sigma)?;
        columns.push(s.data().iter().map(|&x| x as f64).collect());
    }
    let grad = gradient_magnitude(&z)?;
    columns.push(grad.data().iter().map(|&x| x as f64).collect());
    columns.push(match pts {
        Some(p) => p.map.data().to_vec(),
        None => vec![0.0; geom.len()],
    });
    let scale = geom.dims.map(|d| if d > 1 { 1.0 / (d - 1) as f64 } else { 0.0 });
    let mut values = Vec::with_capacity(geom.len() * FEATURE_COUNT);
    for i in 0..geom.len() {
        let c = geom.coords(i);
        for col in &columns {
            values.push(col[i]);
        }
        for a in 0..3 {
            values.push(c[a] as f64 * scale[a]);
        }
    }
    FeatureStack::from_values(geom, values)
}

/// Weights of the per-voxel network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub features: usize,
    pub hidden: usize,
    /// `features x hidden`, row-major by feature.
    pub input_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
    /// Mean training loss at the last epoch.
    #[serde(default)]
    pub final_loss: Option<f64>,
}

impl ModelParams {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        Self {
            features,
            hidden,
            input_weights: vec![0.0; features * hidden],
            hidden_bias: vec![0.0; hidden],
            output_weights: vec![0.0; hidden],
            output_bias: 0.0,
            final_loss: None,
        }
    }

    /// Uniform fan-in scaled weights, zero biases.
    pub fn init(features: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(features, hidden);
        let a = 1.0 / (features as f64).sqrt();
        for w in &mut p.input_weights {
            *w = rng.random_range(-a..a);
        }
        let b = 1.0 / (hidden as f64).sqrt();
        for w in &mut p.output_weights {
            *w = rng.random_range(-b..b);
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.features * self.hidden + 2 * self.hidden + 1
    }

    /// All parameters as one flat vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.input_weights);
        v.extend_from_slice(&self.hidden_bias);
        v.extend_from_slice(&self.output_weights);
        v.push(self.output_bias);
        v
    }

    pub fn set_from_slice(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let fh = self.features * self.hidden;
        let h = self.hidden;
        self.input_weights.copy_from_slice(&flat[..fh]);
        self.hidden_bias.copy_from_slice(&flat[fh..fh + h]);
        self.output_weights.copy_from_slice(&flat[fh + h..fh + 2 * h]);
        self.output_bias = flat[fh + 2 * h];
    }

    fn check(&self, feats: &FeatureStack) -> Result<()> {
        if self.features != FEATURE_COUNT {
            return Err(Error::invalid(format!(
                "model expects {} features, stack has {FEATURE_COUNT}",
                self.features
            )));
        }
        if feats.is_empty() {
            return Err(Error::invalid("empty feature stack"));
        }
        Ok(())
    }

    #[inline]
    fn hidden_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.hidden_bias);
        for (f, &xf) in x.iter().enumerate() {
            let row = &self.input_weights[f * self.hidden..(f + 1) * self.hidden];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xf;
            }
        }
        for o in out.iter_mut() {
            *o = o.tanh();
        }
    }

    #[inline]
    fn output(&self, h: &[f64]) -> f64 {
        let z = self.output_bias + h.iter().zip(&self.output_weights).map(|(a, b)| a * b).sum::<f64>();
        squash(z)
    }
}

#[inline]
fn squash(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN)
}

/// Voxelwise forward pass.
pub fn predict(params: &ModelParams, feats: &FeatureStack) -> Result<ProbMap3> {
    params.check(feats)?;
    let mut h = vec![0.0; params.hidden];
    let out = (0..feats.len())
        .map(|i| {
            params.hidden_into(feats.voxel(i), &mut h);
            params.output(&h)
        })
        .collect();
    Ok(Grid3::from_parts(*feats.geometry(), out))
}

/// One training example: features, target pseudo-label and the click
/// channel used by the point loss.
#[derive(Clone, Debug)]
pub struct TrainCase<'a> {
    pub features: &'a FeatureStack,
    pub target: &'a ProbMap3,
    pub points: &'a PointChannel,
}

impl TrainCase<'_> {
    fn check(&self) -> Result<()> {
        self.features.geometry().check_same(self.target.geometry())?;
        self.features.geometry().check_same(self.points.map.geometry())
    }
}

/// Loss of one case and its gradient in the flat parameter layout.
pub fn case_loss_and_gradient(
    params: &ModelParams,
    case: &TrainCase,
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    params.check(case.features)?;
    case.check()?;
    let h = params.hidden;
    let n = case.features.len();
    let mut hidden = vec![0.0; n * h];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut hidden[i * h..(i + 1) * h];
        params.hidden_into(case.features.voxel(i), row);
        out.push(params.output(row));
    }
    let p = Grid3::from_parts(*case.features.geometry(), out);
    let (value, dp) = total_loss(&p, case.target, case.points, loss)?;

    let fh = params.features * h;
    let mut grad = vec![0.0; params.param_count()];
    let mut dhid = vec![0.0; h];
    for i in 0..n {
        let pi = p.data()[i];
        let dz = dp[i] * pi * (1.0 - pi);
        if dz == 0.0 {
            continue;
        }
        let hrow = &hidden[i * h..(i + 1) * h];
        grad[fh + 2 * h] += dz;
        for k in 0..h {
            grad[fh + h + k] += dz * hrow[k];
            dhid[k] = dz * params.output_weights[k] * (1.0 - hrow[k] * hrow[k]);
            grad[fh + k] += dhid[k];
        }
        for (f, &xf) in case.features.voxel(i).iter().enumerate() {
            let g = &mut grad[f * h..(f + 1) * h];
            for (gk, &dk) in g.iter_mut().zip(&dhid) {
                *gk += dk * xf;
            }
        }
    }
    Ok((value, grad))
}

/// Mean loss over cases and its parameter gradient.
pub fn mean_loss_and_gradient(
    params: &ModelParams,
    cases: &[TrainCase],
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if cases.is_empty() {
        return Err(Error::invalid("training needs at least one case"));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; params.param_count()];
    for case in cases {
        let (l, g) = case_loss_and_gradient(params, case, loss)?;
        total += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let k = cases.len() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    Ok((total / k, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 60,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("hidden units must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        self.loss.validate()
    }
}

fn check_finite(epoch: usize, loss: f64, values: &[f64]) -> Result<()> {
    if loss.is_finite() && values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Full-batch gradient descent with momentum from a seeded initialization.
pub fn train_predictor(cases: &[TrainCase], cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::init(FEATURE_COUNT, cfg.hidden, cfg.seed);
    let mut flat = params.to_vec();
    let mut velocity = vec![0.0; flat.len()];
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let (loss, grad) = mean_loss_and_gradient(&params, cases, &cfg.loss)?;
        check_finite(epoch, loss, &grad)?;
        for ((v, w), g) in velocity.iter_mut().zip(flat.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *w += *v;
        }
        check_finite(epoch, loss, &flat)?;
        params.set_from_slice(&flat);
        last = loss;
    }
    params.final_loss = Some(last);
    Ok(params)
}
