//! Black-box energy estimator: a residual MLP regressing measured joules
//! from the input alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, Params};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::Tensor;

pub const WIDTH: usize = 64;
pub const BLOCKS: usize = 4;
pub const MIN_PAIRS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub scale: f64,
}

impl Normalization {
    /// Zero mean, unit standard deviation; unit scale for constant targets.
    pub fn fit(targets: &[f64]) -> Self {
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub input_dim: usize,
    /// Free-form name of the model whose energy was measured.
    pub target: String,
    pub normalization: Normalization,
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Decoupled L2 shrinkage applied after each Adam step.
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { epochs: 2000, lr: 3e-3, batch_size: 32, validation_fraction: 0.1, weight_decay: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub train_pairs: usize,
    pub validation_pairs: usize,
    /// Held-out RMSE in joules.
    pub validation_rmse: f64,
    /// Max minus min of all measured energies.
    pub energy_range: f64,
    /// `validation_rmse / energy_range`; absent when the range is zero.
    pub relative_rmse: Option<f64>,
    pub final_train_loss: f64,
}

impl Estimator {
    pub fn new(input_dim: usize, target: &str, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let mut params = Params::new();
        nn::init_dense(&mut params, "stem", input_dim, WIDTH, &mut r);
        for i in 0..BLOCKS {
            nn::init_dense(&mut params, &format!("block{i}.fc1"), WIDTH, WIDTH, &mut r);
            nn::init_dense(&mut params, &format!("block{i}.fc2"), WIDTH, WIDTH, &mut r);
        }
        nn::init_dense(&mut params, "head", WIDTH, 1, &mut r);
        // A zero head starts every prediction at the target mean.
        params.get_mut("head.w").expect("head").data_mut().fill(0.0);
        Self { input_dim, target: target.to_string(), normalization: Normalization { mean: 0.0, scale: 1.0 }, params }
    }

    /// Normalized prediction `[rows, 1]` for `x` (`[rows, input_dim]`).
    fn build_normalized(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let s = nn::dense(g, p, "stem", x)?;
        let mut h = g.relu(s)?;
        for i in 0..BLOCKS {
            let a = nn::dense(g, p, &format!("block{i}.fc1"), h)?;
            let a = g.relu(a)?;
            let r = nn::dense(g, p, &format!("block{i}.fc2"), a)?;
            h = g.add(h, r)?;
        }
        nn::dense(g, p, "head", h)
    }

    /// Predicted joules `[rows, 1]`, differentiable in `x`.
    pub fn build(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = self.build_normalized(g, x)?;
        let scaled = g.scale(z, self.normalization.scale)?;
        g.add_scalar(scaled, self.normalization.mean)
    }

    pub fn predict_batch(&self, xs: &[Tensor]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(vec![]);
        }
        for x in xs {
            check_dim(self.input_dim, x)?;
        }
        let mut g = Graph::new();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let xi = g.input("x", nn::batch(xs, &idx))?;
        let y = self.build(&mut g, xi)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn check_dim(expected: usize, x: &Tensor) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: x.len() });
    }
    Ok(())
}

/// Predicted joules for one input.
pub fn predict_energy(est: &Estimator, x: &Tensor) -> Result<f64> {
    Ok(est.predict_batch(std::slice::from_ref(x))?[0])
}

/// Mean squared error.
pub fn estimator_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64)
}

/// Fits an estimator on `(inputs, measured)` pairs. Only the measured joules
/// are consumed; the model that produced them stays opaque.
pub fn train_estimator(inputs: &[Tensor], measured: &[f64], target: &str, cfg: &EstimatorConfig) -> Result<(Estimator, EstimatorReport)> {
    if inputs.len() != measured.len() {
        return Err(Error::InvalidArgument(format!("{} inputs for {} energies", inputs.len(), measured.len())));
    }
    if inputs.len() < MIN_PAIRS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_PAIRS} pairs, got {}", inputs.len())));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::InvalidArgument("batch_size must be positive and validation_fraction in [0,1)".into()));
    }
    let dim = inputs[0].len();
    for x in inputs {
        check_dim(dim, x)?;
    }

    let mut order_rng = rng::stream(rng::derive(cfg.seed, "estimator-split"));
    let order = nn::shuffled(inputs.len(), &mut order_rng);
    let n_val = ((inputs.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut est = Estimator::new(dim, target, rng::derive(cfg.seed, "estimator-init"));
    let train_targets: Vec<f64> = train_idx.iter().map(|&i| measured[i]).collect();
    est.normalization = Normalization::fit(&train_targets);

    let mut adam = AdamState::default();
    let mut batch_rng = rng::stream(rng::derive(cfg.seed, "estimator-batches"));
    let mut final_train_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        // Cosine decay to zero over the run.
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let perm = nn::shuffled(train_idx.len(), &mut batch_rng);
        let mut total = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let rows: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let mut g = Graph::new();
            let x = g.input("x", nn::batch(inputs, &rows))?;
            let y: Vec<f64> = rows.iter().map(|&i| est.normalization.normalize(measured[i])).collect();
            let y = g.constant(Tensor::new(vec![rows.len(), 1], y)?)?;
            let z = est.build_normalized(&mut g, x)?;
            let d = g.sub(z, y)?;
            let sq = g.square(d)?;
            let loss = g.mean(sq, crate::graph::Axis::All)?;
            total += g.value(loss).item()? * rows.len() as f64;
            let grads = g.backward(loss)?.params();
            adam.step(&mut est.params, &grads, lr)?;
            if cfg.weight_decay > 0.0 {
                let keep = 1.0 - lr * cfg.weight_decay;
                est.params.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= keep));
            }
        }
        final_train_loss = total / train_idx.len() as f64 * est.normalization.scale.powi(2);
    }

    let val_inputs: Vec<Tensor> = val_idx.iter().map(|&i| inputs[i].clone()).collect();
    let val_targets: Vec<f64> = val_idx.iter().map(|&i| measured[i]).collect();
    let preds = est.predict_batch(&val_inputs)?;
    let validation_rmse = estimator_loss(&preds, &val_targets)?.sqrt();
    let lo = measured.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = measured.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let energy_range = hi - lo;
    let report = EstimatorReport {
        train_pairs: train_idx.len(),
        validation_pairs: val_idx.len(),
        validation_rmse,
        energy_range,
        relative_rmse: (energy_range > 0.0).then(|| validation_rmse / energy_range),
        final_train_loss,
    };
    Ok((est, report))
}
