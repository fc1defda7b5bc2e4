//! Energy-surging test-input generation.
//!
//! Black-box modes optimize `w` with Adam so that `(tanh(w)+1)/2` raises the
//! estimator's predicted energy: input-based stays near a seed input,
//! universal is unconstrained. ILFO is the white-box baseline driving gate
//! values or exit entropies directly; the surrogate pipeline runs ILFO on a
//! label-trained stand-in and replays the result on the real target.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adnn::{train_skip, Adnn, ConditionalSkipNet, EarlyExitNet, GateMode, SkipConfig, TrainConfig};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::graph::{Axis, Graph, NodeId};
use crate::metrics::{self, TransferMetrics, TransferRecord};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    InputBased,
    Universal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestGenConfig {
    pub mode: Mode,
    pub c: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Universal mode only.
    pub restarts: usize,
    /// Input-based mode: return the lowest-loss iterate instead of the last.
    #[serde(default)]
    pub track_best: bool,
    /// Standard deviation of the initial `w`.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub seed: u64,
}

fn default_init_std() -> f64 {
    0.1
}

impl Default for TestGenConfig {
    fn default() -> Self {
        Self {
            mode: Mode::InputBased,
            c: 10.0,
            lr: 0.01,
            iterations: 500,
            restarts: 30,
            track_best: false,
            init_std: default_init_std(),
            seed: 0,
        }
    }
}

impl TestGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || self.restarts == 0 {
            return Err(Error::InvalidArgument(format!("test generation config out of range: {self:?}")));
        }
        if !(self.lr >= 0.0 && self.init_std >= 0.0) {
            return Err(Error::InvalidArgument("lr and init_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// `(tanh(w) + 1) / 2`, elementwise.
pub fn reparam(w: &Tensor) -> Tensor {
    w.map(|v| (v.tanh() + 1.0) / 2.0)
}

/// Inverse of [`reparam`], with `x` pulled inside `[ε, 1−ε]`.
pub fn inverse_reparam(x: &Tensor) -> Tensor {
    x.map(|v| (2.0 * v - 1.0).clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh())
}

fn reparam_node(g: &mut Graph, w: NodeId) -> Result<NodeId> {
    let t = g.tanh(w)?;
    let shifted = g.add_scalar(t, 1.0)?;
    g.scale(shifted, 0.5)
}

fn row(t: &Tensor) -> Result<Tensor> {
    t.clone().reshape(&[1, t.len()])
}

/// Records the mode's loss for `w` on `g`; returns `(w, loss)`.
fn record_loss(g: &mut Graph, w: &Tensor, x: Option<&Tensor>, c: f64, est: &Estimator) -> Result<(NodeId, NodeId)> {
    let wi = g.input("w", row(w)?)?;
    let img = reparam_node(g, wi)?;
    let pred = est.build(g, img)?;
    let energy = g.sum(pred, Axis::All)?;
    let loss = match x {
        Some(x) => {
            let xc = g.constant(row(x)?)?;
            let d = g.sub(img, xc)?;
            let dist = g.l2_norm(d)?;
            let gain = g.scale(energy, c)?;
            g.sub(dist, gain)?
        }
        None => g.neg(energy)?,
    };
    Ok((wi, loss))
}

fn check_pair(w: &Tensor, x: &Tensor, est: &Estimator) -> Result<()> {
    if w.len() != est.input_dim {
        return Err(Error::DimensionMismatch { expected: est.input_dim, got: w.len() });
    }
    if x.len() != w.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: x.len() });
    }
    Ok(())
}

/// `‖reparam(w) − x‖₂ − c·EST(reparam(w))`.
pub fn input_based_loss(w: &Tensor, x: &Tensor, c: f64, est: &Estimator) -> Result<f64> {
    check_pair(w, x, est)?;
    let mut g = Graph::new();
    let (_, loss) = record_loss(&mut g, w, Some(x), c, est)?;
    g.value(loss).item()
}

/// `−EST(reparam(w))`.
pub fn universal_loss(w: &Tensor, est: &Estimator) -> Result<f64> {
    check_pair(w, w, est)?;
    let mut g = Graph::new();
    let (_, loss) = record_loss(&mut g, w, None, 1.0, est)?;
    g.value(loss).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub input: Tensor,
    /// Loss of the returned input.
    pub loss: f64,
    /// Final loss of every restart (one entry in input-based mode).
    pub restart_losses: Vec<f64>,
    pub iterations: usize,
}

struct Run {
    w: Tensor,
    loss: f64,
}

fn optimize(w0: Tensor, x: Option<&Tensor>, cfg: &TestGenConfig, est: &Estimator, track_best: bool) -> Result<Run> {
    let mut params = BTreeMap::from([("w".to_string(), w0)]);
    let mut adam = AdamState::default();
    let mut best: Option<Run> = None;
    for _ in 0..cfg.iterations {
        let mut g = Graph::new();
        let (wi, loss) = record_loss(&mut g, &params["w"], x, cfg.c, est)?;
        let l = g.value(loss).item()?;
        if track_best && best.as_ref().is_none_or(|b| l < b.loss) {
            best = Some(Run { w: params["w"].clone(), loss: l });
        }
        let grad = g.backward(loss)?.wrt(wi).reshape(params["w"].shape())?;
        adam.step(&mut params, &BTreeMap::from([("w".to_string(), grad)]), cfg.lr)?;
    }
    let w = params.remove("w").expect("w");
    // Loss of the final iterate, after the last update.
    let mut g = Graph::new();
    let (_, loss) = record_loss(&mut g, &w, x, cfg.c, est)?;
    let final_loss = g.value(loss).item()?;
    match best {
        Some(b) if b.loss < final_loss => Ok(b),
        _ => Ok(Run { w, loss: final_loss }),
    }
}

fn initial_w(dim: usize, std: f64, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::new(vec![dim], (0..dim).map(|_| normal.sample(&mut r)).collect())
}

/// Runs the generation loop for one seed input (input-based) or from
/// scratch (universal). Only the estimator is consulted.
pub fn generate(x: Option<&Tensor>, cfg: &TestGenConfig, est: &Estimator) -> Result<Generated> {
    cfg.validate()?;
    let dim = est.input_dim;
    match cfg.mode {
        Mode::InputBased => {
            let x = x.ok_or_else(|| Error::InvalidArgument("input-based mode needs a seed input".into()))?;
            if x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
            }
            let w0 = initial_w(dim, cfg.init_std, rng::derive(cfg.seed, "testgen-init"))?;
            let run = optimize(w0, Some(x), cfg, est, cfg.track_best)?;
            Ok(Generated { input: reparam(&run.w), loss: run.loss, restart_losses: vec![run.loss], iterations: cfg.iterations })
        }
        Mode::Universal => {
            let mut runs = Vec::with_capacity(cfg.restarts);
            for r in 0..cfg.restarts {
                let w0 = initial_w(dim, cfg.init_std, rng::derive_indexed(rng::derive(cfg.seed, "testgen-restart"), r as u64))?;
                runs.push(optimize(w0, None, cfg, est, false)?);
            }
            let restart_losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
            let best = runs.into_iter().reduce(|a, b| if b.loss < a.loss { b } else { a }).expect("at least one restart");
            Ok(Generated { input: reparam(&best.w), loss: best.loss, restart_losses, iterations: cfg.iterations })
        }
    }
}

/// `Σ max(0, G_T − gᵢ)`.
pub fn ilfo_gate_loss(gate_values: &[f64], g_t: f64) -> f64 {
    gate_values.iter().map(|&g| (g_t - g).max(0.0)).sum()
}

/// `Σ max(0, T_H + margin − H_e)` over every exit but the last.
pub fn ilfo_exit_loss(exit_entropies: &[f64], t_h: f64, margin: f64) -> f64 {
    let early = exit_entropies.len().saturating_sub(1);
    exit_entropies[..early].iter().map(|&h| (t_h + margin - h).max(0.0)).sum()
}

/// A model the attacker can differentiate through.
#[derive(Clone, Copy, Debug)]
pub enum WhiteBox<'a> {
    Skip(&'a ConditionalSkipNet),
    Exit(&'a EarlyExitNet),
}

impl WhiteBox<'_> {
    pub fn input_dim(&self) -> usize {
        match self {
            WhiteBox::Skip(m) => m.config.input_dim,
            WhiteBox::Exit(m) => m.config.input_dim,
        }
    }

    pub fn as_adnn(&self) -> &dyn Adnn {
        match *self {
            WhiteBox::Skip(m) => m,
            WhiteBox::Exit(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlfoConfig {
    pub c: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Extra clearance beyond the gate or entropy threshold.
    pub margin: f64,
    /// Target gate level; the model's own threshold when absent.
    #[serde(default)]
    pub gate_target: Option<f64>,
}

impl Default for IlfoConfig {
    fn default() -> Self {
        Self { c: 100.0, lr: 0.01, iterations: 500, margin: 0.05, gate_target: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlfoResult {
    pub input: Tensor,
    pub best_loss: f64,
    /// Running minimum of the loss, one entry per evaluated iterate.
    pub min_loss_history: Vec<f64>,
}

/// Records `‖img − x‖² + c·hinge` for `w`; returns `(w, loss)`.
fn record_ilfo(g: &mut Graph, model: WhiteBox, w: &Tensor, x: &Tensor, cfg: &IlfoConfig) -> Result<(NodeId, NodeId)> {
    let wi = g.input("w", row(w)?)?;
    let img = reparam_node(g, wi)?;
    let hinge = match model {
        WhiteBox::Skip(m) => {
            let target = cfg.gate_target.unwrap_or(m.config.gate_threshold) + cfg.margin;
            let fwd = m.build(g, img, GateMode::Soft)?;
            hinge_sum(g, &fwd.gates, target)?
        }
        WhiteBox::Exit(m) => {
            let exits = m.build(g, img)?;
            let target = m.config.entropy_threshold + cfg.margin;
            let mut ents = Vec::with_capacity(exits.len());
            for &e in &exits[..exits.len() - 1] {
                ents.push(g.softmax_entropy(e)?);
            }
            hinge_sum(g, &ents, target)?
        }
    };
    let xc = g.constant(row(x)?)?;
    let d = g.sub(img, xc)?;
    let sq = g.square(d)?;
    let dist = g.sum(sq, Axis::All)?;
    let pen = g.scale(hinge, cfg.c)?;
    Ok((wi, g.add(dist, pen)?))
}

/// `Σ max(0, target − vᵢ)` over scalar-per-row nodes.
fn hinge_sum(g: &mut Graph, values: &[NodeId], target: f64) -> Result<NodeId> {
    let mut total = g.constant(Tensor::scalar(0.0))?;
    for &v in values {
        let neg = g.neg(v)?;
        let gap = g.add_scalar(neg, target)?;
        let h = g.max_const(gap, 0.0)?;
        let s = g.sum(h, Axis::All)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// White-box attack from `x`, returning the lowest-loss iterate seen.
pub fn ilfo_attack(model: WhiteBox, x: &Tensor, cfg: &IlfoConfig) -> Result<IlfoResult> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: x.len() });
    }
    if !(cfg.c >= 0.0 && cfg.margin >= 0.0 && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("ILFO config out of range: {cfg:?}")));
    }
    let mut params = BTreeMap::from([("w".to_string(), inverse_reparam(x))]);
    let mut adam = AdamState::default();
    let mut best_w = params["w"].clone();
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let mut g = Graph::new();
        let (wi, loss) = record_ilfo(&mut g, model, &params["w"], x, cfg)?;
        let l = g.value(loss).item()?;
        if l < best_loss {
            best_loss = l;
            best_w = params["w"].clone();
        }
        history.push(best_loss);
        if it == cfg.iterations {
            break;
        }
        let grad = g.backward(loss)?.wrt(wi).reshape(params["w"].shape())?;
        adam.step(&mut params, &BTreeMap::from([("w".to_string(), grad)]), cfg.lr)?;
    }
    Ok(IlfoResult { input: reparam(&best_w), best_loss, min_loss_history: history })
}

/// Fits a conditional-skipping surrogate to the target's predicted labels.
/// Only `infer(..).label()` of the target is consulted.
pub fn train_surrogate<M: Adnn + ?Sized>(
    target: &M,
    inputs: &[Tensor],
    arch: &SkipConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<ConditionalSkipNet> {
    if inputs.is_empty() {
        return Err(Error::Empty("surrogate training inputs"));
    }
    let mut labels = Vec::with_capacity(inputs.len());
    let mut classes = 0;
    for x in inputs {
        let t = target.infer(x)?;
        classes = classes.max(t.logits.len());
        labels.push(t.label());
    }
    let ds = LabeledDataset { inputs: inputs.to_vec(), labels, difficulty: vec![0.0; inputs.len()] };
    let mut model = ConditionalSkipNet::new(SkipConfig { classes, ..arch.clone() }, seed);
    train_skip(&mut model, &ds, train)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub records: Vec<TransferRecord>,
    pub metrics: TransferMetrics,
}

/// Attacks `base` with ILFO from every seed and replays the results on `target`.
pub fn transfer_attack<M: Adnn + ?Sized>(
    base: WhiteBox,
    base_adnn: &dyn Adnn,
    target: &M,
    seeds: &[Tensor],
    cfg: &IlfoConfig,
) -> Result<(Vec<Tensor>, TransferReport)> {
    if seeds.is_empty() {
        return Err(Error::Empty("replay set"));
    }
    let mut tests = Vec::with_capacity(seeds.len());
    let mut records = Vec::with_capacity(seeds.len());
    for x in seeds {
        let f = ilfo_attack(base, x, cfg)?.input;
        records.push(TransferRecord {
            base_orig: base_adnn.infer(x)?.flops,
            base_test: base_adnn.infer(&f)?.flops,
            base_max: base_adnn.max_flops(),
            target_orig: target.infer(x)?.flops,
            target_test: target.infer(&f)?.flops,
            target_max: target.max_flops(),
        });
        tests.push(f);
    }
    let metrics = metrics::transfer_metrics(&records)?;
    Ok((tests, TransferReport { records, metrics }))
}

/// Label-trained surrogate, ILFO against it, replay on the target.
pub fn surrogate_pipeline<M: Adnn + ?Sized>(
    target: &M,
    train_inputs: &[Tensor],
    arch: &SkipConfig,
    train: &TrainConfig,
    seeds: &[Tensor],
    cfg: &IlfoConfig,
    seed: u64,
) -> Result<(ConditionalSkipNet, Vec<Tensor>, TransferReport)> {
    if seeds.is_empty() {
        return Err(Error::Empty("replay set"));
    }
    let surrogate = train_surrogate(target, train_inputs, arch, train, seed)?;
    let (tests, report) = transfer_attack(WhiteBox::Skip(&surrogate), &surrogate, target, seeds, cfg)?;
    Ok((surrogate, tests, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est_const(k: f64) -> Estimator {
        let mut e = Estimator::new(64, "const", 1);
        e.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
        e.params.get_mut("head.b").unwrap().data_mut().fill(0.0);
        e.normalization.mean = k;
        e
    }

    /// Predicted joules equal the mean pixel value.
    fn est_mean() -> Estimator {
        let mut e = est_const(0.0);
        let d = 64;
        let w = crate::estimator::WIDTH;
        e.params.get_mut("stem.w").unwrap().data_mut().fill(0.0);
        for k in 0..d {
            e.params.get_mut("stem.w").unwrap().data_mut()[k * w] = 1.0 / d as f64;
        }
        for i in 0..crate::estimator::BLOCKS {
            e.params.get_mut(&format!("block{i}.fc2.w")).unwrap().data_mut().fill(0.0);
        }
        e.params.get_mut("head.w").unwrap().data_mut()[0] = 1.0;
        e
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(reparam(&Tensor::zeros(&[4])).data(), &[0.5; 4]);
        assert!(reparam(&Tensor::filled(&[3], 20.0)).data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(reparam(&Tensor::filled(&[3], -20.0)).data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn input_based_loss_examples() {
        let x = Tensor::new(vec![64], (0..64).map(|i| 0.1 + 0.8 * i as f64 / 63.0).collect()).unwrap();
        let w = inverse_reparam(&x);
        let e = est_const(2.0);
        assert!(input_based_loss(&w, &x, 1e-12, &e).unwrap().abs() < 1e-9);
        assert!((input_based_loss(&w, &x, 3.0, &e).unwrap() + 6.0).abs() < 1e-9);
        let w2 = w.map(|v| v + 0.3);
        let d = (reparam(&w2).data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sqrt();
        assert!((input_based_loss(&w2, &x, 3.0, &e).unwrap() - (d - 6.0)).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for c in [0.5, 1.0, 4.0] {
            let l = input_based_loss(&w2, &x, c, &e).unwrap();
            assert!(l <= last);
            last = l;
        }
    }

    #[test]
    fn universal_loss_is_negated_prediction() {
        let e = est_mean();
        let w = initial_w(64, 0.5, 3).unwrap();
        let pred = crate::estimator::predict_energy(&e, &reparam(&w)).unwrap();
        assert_eq!(universal_loss(&w, &e).unwrap(), -pred);
    }

    #[test]
    fn constant_estimator_has_zero_gradient() {
        let e = est_const(2.0);
        let mut g = Graph::new();
        let (wi, loss) = record_loss(&mut g, &initial_w(64, 0.1, 0).unwrap(), None, 1.0, &e).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), -2.0);
        assert!(g.backward(loss).unwrap().wrt(wi).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn universal_on_mean_estimator_brightens() {
        let cfg = TestGenConfig { mode: Mode::Universal, iterations: 300, restarts: 2, lr: 0.05, ..Default::default() };
        let out = generate(None, &cfg, &est_mean()).unwrap();
        assert!(out.input.mean() > 0.95);
        assert!(out.restart_losses.iter().all(|&l| out.loss <= l));
    }

    #[test]
    fn zero_iterations_returns_initial_image() {
        let cfg = TestGenConfig { iterations: 0, ..Default::default() };
        let x = Tensor::filled(&[64], 0.2);
        let out = generate(Some(&x), &cfg, &est_const(1.0)).unwrap();
        let w0 = initial_w(64, cfg.init_std, rng::derive(cfg.seed, "testgen-init")).unwrap();
        assert_eq!(out.input, reparam(&w0));
        assert!(out.input.data().iter().all(|v| (v - 0.5).abs() < 0.2));
    }

    #[test]
    fn input_based_requires_seed() {
        assert!(generate(None, &TestGenConfig::default(), &est_const(1.0)).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert!((ilfo_gate_loss(&[0.6, 0.3], 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(ilfo_gate_loss(&[0.5, 0.9], 0.5), 0.0);
        assert_eq!(ilfo_gate_loss(&[0.0; 8], 0.5), 4.0);
        assert_eq!(ilfo_exit_loss(&[0.9, 0.8, 0.0], 0.5, 0.1), 0.0);
        assert!((ilfo_exit_loss(&[0.2, 0.7, 0.0], 0.5, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(ilfo_exit_loss(&[0.5, 0.5, 0.0], 0.5, 0.0), 0.0);
    }

    #[test]
    fn ilfo_keeps_feasible_input() {
        let m = ConditionalSkipNet::new(SkipConfig::default(), 1);
        let mut open = m.clone();
        for i in 0..8 {
            open.params.get_mut(&format!("gate{i}.w")).unwrap().data_mut().fill(0.0);
            open.params.get_mut(&format!("gate{i}.b")).unwrap().data_mut()[0] = 10.0;
        }
        let x = Tensor::filled(&[64], 0.3);
        let r = ilfo_attack(WhiteBox::Skip(&open), &x, &IlfoConfig { iterations: 20, ..Default::default() }).unwrap();
        let d = r.input.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d < 1e-3);
        assert!(r.min_loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ilfo_exit_attack_runs() {
        let m = EarlyExitNet::new(crate::adnn::ExitConfig::default(), 2);
        let x = Tensor::filled(&[64], 0.3);
        let r = ilfo_attack(WhiteBox::Exit(&m), &x, &IlfoConfig { iterations: 30, ..Default::default() }).unwrap();
        assert!(r.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(r.min_loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn empty_replay_set_is_error() {
        let m = ConditionalSkipNet::new(SkipConfig::default(), 1);
        let r = transfer_attack(WhiteBox::Skip(&m), &m, &m, &[], &IlfoConfig::default());
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
