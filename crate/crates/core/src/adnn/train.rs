use serde::{Deserialize, Serialize};

use super::{Adnn, ConditionalSkipNet, Decisions};
use super::{EarlyExitNet, GateMode};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph};
use crate::nn;
use crate::optim::AdamState;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the mean soft gate value in the skip-net loss.
    pub sparsity: f64,
    pub seed: u64,
    #[serde(skip)]
    pub gate_mode: GateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 0.003, batch_size: 32, sparsity: 0.05, seed: 0, gate_mode: GateMode::StraightThrough }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipTrainReport {
    /// Hard-mode accuracy on the training set.
    pub accuracy: f64,
    /// Hard-mode active-block count per example.
    pub active_blocks: Vec<usize>,
    pub final_loss: f64,
}

impl SkipTrainReport {
    pub fn mean_active(&self) -> f64 {
        self.active_blocks.iter().sum::<usize>() as f64 / self.active_blocks.len() as f64
    }

    pub fn distinct_active(&self) -> usize {
        let mut v = self.active_blocks.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrainReport {
    /// Accuracy of each exit evaluated on every example.
    pub per_exit_accuracy: Vec<f64>,
    /// Accuracy of the deployed early-exit policy.
    pub accuracy: f64,
    pub exit_indices: Vec<usize>,
    pub final_loss: f64,
}

fn check(ds: &LabeledDataset, cfg: &TrainConfig, classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if cfg.batch_size == 0 || cfg.sparsity < 0.0 {
        return Err(Error::InvalidArgument("batch_size must be positive and sparsity non-negative".into()));
    }
    if ds.labels.iter().any(|&l| l >= classes) {
        return Err(Error::InvalidArgument("label outside the model's classes".into()));
    }
    Ok(())
}

/// Trains gates and weights jointly on
/// `cross_entropy + sparsity · mean(gate values)`; reports hard-mode results.
///
/// The default gate mode is straight-through: the forward pass uses hard
/// decisions so training sees the deployed network, and gradients flow
/// through the soft gate values.
pub fn train_skip(model: &mut ConditionalSkipNet, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<SkipTrainReport> {
    check(ds, cfg, model.config.classes)?;
    let mut adam = AdamState::default();
    let mut order_rng = rng::stream(rng::derive(cfg.seed, "train-skip"));
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let order = nn::shuffled(ds.len(), &mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.input("x", nn::batch(&ds.inputs, chunk))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let y = g.constant(nn::one_hot(&labels, model.config.classes))?;
            let fwd = model.build(&mut g, x, cfg.gate_mode)?;
            let ce = g.cross_entropy(fwd.logits, y)?;
            let mut gate_sum = g.mean(fwd.gates[0], Axis::All)?;
            for &gate in &fwd.gates[1..] {
                let m = g.mean(gate, Axis::All)?;
                gate_sum = g.add(gate_sum, m)?;
            }
            let penalty = g.scale(gate_sum, cfg.sparsity / fwd.gates.len() as f64)?;
            let loss = g.add(ce, penalty)?;
            total += g.value(loss).item()? * chunk.len() as f64;
            let grads = g.backward(loss)?.params();
            adam.step(&mut model.params, &grads, cfg.lr)?;
        }
        final_loss = total / ds.len() as f64;
    }
    let (accuracy, active_blocks) = evaluate_skip(model, ds)?;
    Ok(SkipTrainReport { accuracy, active_blocks, final_loss })
}

/// Hard-mode accuracy and per-example active-block counts.
pub(crate) fn evaluate_skip(model: &ConditionalSkipNet, ds: &LabeledDataset) -> Result<(f64, Vec<usize>)> {
    let mut g = Graph::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let x = g.input("x", nn::batch(&ds.inputs, &idx))?;
    let fwd = model.build(&mut g, x, GateMode::Hard)?;
    let logits = g.value(fwd.logits);
    let correct = (0..ds.len()).filter(|&i| nn::argmax(logits.row(i)) == ds.labels[i]).count();
    let active = fwd.decisions.iter().map(|d| d.iter().filter(|&&b| b).count()).collect();
    Ok((correct as f64 / ds.len() as f64, active))
}

/// Joint training of every exit on the sum of their cross-entropies.
pub fn train_exit(model: &mut EarlyExitNet, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<ExitTrainReport> {
    check(ds, cfg, model.config.classes)?;
    let mut adam = AdamState::default();
    let mut order_rng = rng::stream(rng::derive(cfg.seed, "train-exit"));
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let order = nn::shuffled(ds.len(), &mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.input("x", nn::batch(&ds.inputs, chunk))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let y = g.constant(nn::one_hot(&labels, model.config.classes))?;
            let exits = model.build(&mut g, x)?;
            let mut loss = g.cross_entropy(exits[0], y)?;
            for &e in &exits[1..] {
                let ce = g.cross_entropy(e, y)?;
                loss = g.add(loss, ce)?;
            }
            total += g.value(loss).item()? * chunk.len() as f64;
            let grads = g.backward(loss)?.params();
            adam.step(&mut model.params, &grads, cfg.lr)?;
        }
        final_loss = total / ds.len() as f64;
    }

    let mut g = Graph::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let x = g.input("x", nn::batch(&ds.inputs, &idx))?;
    let exits = model.build(&mut g, x)?;
    let per_exit_accuracy = exits
        .iter()
        .map(|&e| {
            let l = g.value(e);
            (0..ds.len()).filter(|&i| nn::argmax(l.row(i)) == ds.labels[i]).count() as f64 / ds.len() as f64
        })
        .collect();
    let mut exit_indices = Vec::with_capacity(ds.len());
    let mut correct = 0;
    for (x, &label) in ds.inputs.iter().zip(&ds.labels) {
        let t = model.infer(x)?;
        if let Decisions::Exit(i) = t.decisions {
            exit_indices.push(i);
        }
        correct += usize::from(t.label() == label);
    }
    Ok(ExitTrainReport { per_exit_accuracy, accuracy: correct as f64 / ds.len() as f64, exit_indices, final_loss })
}

#[cfg(test)]
mod tests {
    use super::super::{ExitConfig, SkipConfig};
    use super::*;
    use crate::dataset;

    #[test]
    fn zero_lr_leaves_parameters() {
        let ds = dataset::generate(40, 4, 0.5, 1).unwrap();
        let mut m = ConditionalSkipNet::new(SkipConfig::default(), 2);
        let before = m.params.clone();
        train_skip(&mut m, &ds, &TrainConfig { epochs: 1, lr: 0.0, sparsity: 0.0, ..Default::default() }).unwrap();
        assert_eq!(m.params, before);

        let mut e = EarlyExitNet::new(ExitConfig::default(), 2);
        let before = e.params.clone();
        train_exit(&mut e, &ds, &TrainConfig { epochs: 1, lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(e.params, before);
    }

    #[test]
    fn empty_dataset_is_error() {
        let ds = dataset::generate(0, 4, 0.5, 1).unwrap();
        let mut m = ConditionalSkipNet::new(SkipConfig::default(), 2);
        assert!(matches!(train_skip(&mut m, &ds, &TrainConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn single_example_overfits_first_exit() {
        let ds = dataset::generate(1, 4, 0.5, 3).unwrap();
        let mut e = EarlyExitNet::new(ExitConfig::default(), 4);
        train_exit(&mut e, &ds, &TrainConfig { epochs: 300, lr: 0.01, ..Default::default() }).unwrap();
        let p = e.exit_probabilities(&ds.inputs[0]).unwrap();
        assert!(crate::adnn::entropy(p[0].data()).unwrap() < 0.05);
    }
}
