//! Detection defenses: an input filter and a gradient-feature SVM that
//! stops inference early on flagged inputs.

use serde::{Deserialize, Serialize};

use crate::adnn::{ExecutionTrace, GateMode};
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph};
use crate::metrics;
use crate::nn::{self, Params};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::Tensor;
use crate::testgen::WhiteBox;

pub const FILTER_WIDTH: usize = 16;
pub const FILTER_BLOCKS: usize = 3;

/// Binary residual MLP: label 1 means energy-surging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterModel {
    pub input_dim: usize,
    pub params: Params,
}

impl FilterModel {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let mut params = Params::new();
        nn::init_dense(&mut params, "stem", input_dim, FILTER_WIDTH, &mut r);
        for i in 0..FILTER_BLOCKS {
            nn::init_dense(&mut params, &format!("block{i}.fc1"), FILTER_WIDTH, FILTER_WIDTH, &mut r);
            nn::init_dense(&mut params, &format!("block{i}.fc2"), FILTER_WIDTH, FILTER_WIDTH, &mut r);
        }
        nn::init_dense(&mut params, "head", FILTER_WIDTH, 2, &mut r);
        Self { input_dim, params }
    }

    pub fn flops(&self) -> u64 {
        nn::dense_flops(self.input_dim, FILTER_WIDTH)
            + FILTER_BLOCKS as u64 * 2 * nn::dense_flops(FILTER_WIDTH, FILTER_WIDTH)
            + nn::dense_flops(FILTER_WIDTH, 2)
    }

    fn build(&self, g: &mut Graph, x: crate::graph::NodeId) -> Result<crate::graph::NodeId> {
        let p = &self.params;
        let s = nn::dense(g, p, "stem", x)?;
        let mut h = g.relu(s)?;
        for i in 0..FILTER_BLOCKS {
            let a = nn::dense(g, p, &format!("block{i}.fc1"), h)?;
            let a = g.relu(a)?;
            let r = nn::dense(g, p, &format!("block{i}.fc2"), a)?;
            h = g.add(h, r)?;
        }
        nn::dense(g, p, "head", h)
    }

    /// `true` when `x` is classified as energy-surging.
    pub fn flags(&self, xs: &[Tensor]) -> Result<Vec<bool>> {
        if xs.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::new();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let x = g.input("x", nn::batch(xs, &idx))?;
        let logits = self.build(&mut g, x)?;
        let l = g.value(logits);
        Ok((0..xs.len()).map(|i| nn::argmax(l.row(i)) == 1).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 0.01, batch_size: 32, holdout_fraction: 0.2, seed: 0 }
    }
}

/// Trains the filter on normal (label 0) and noisy (label 1) inputs and
/// returns it with its held-out accuracy.
pub fn train_filter(normal: &[Tensor], noisy: &[Tensor], cfg: &FilterConfig) -> Result<(FilterModel, f64)> {
    if normal.is_empty() {
        return Err(Error::Empty("normal inputs"));
    }
    if noisy.is_empty() {
        return Err(Error::Empty("noisy inputs"));
    }
    let inputs: Vec<Tensor> = normal.iter().chain(noisy).cloned().collect();
    let labels: Vec<usize> = (0..inputs.len()).map(|i| usize::from(i >= normal.len())).collect();
    let mut split_rng = rng::stream(rng::derive(cfg.seed, "filter-split"));
    let order = nn::shuffled(inputs.len(), &mut split_rng);
    let n_hold = ((inputs.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, inputs.len() - 1);
    let (hold, train) = order.split_at(n_hold);

    let mut model = FilterModel::new(inputs[0].len(), rng::derive(cfg.seed, "filter-init"));
    let mut adam = AdamState::default();
    let mut batch_rng = rng::stream(rng::derive(cfg.seed, "filter-batches"));
    for _ in 0..cfg.epochs {
        let perm = nn::shuffled(train.len(), &mut batch_rng);
        for chunk in perm.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<usize> = chunk.iter().map(|&k| train[k]).collect();
            let mut g = Graph::new();
            let x = g.input("x", nn::batch(&inputs, &rows))?;
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let y = g.constant(nn::one_hot(&y, 2))?;
            let logits = model.build(&mut g, x)?;
            let loss = g.cross_entropy(logits, y)?;
            let grads = g.backward(loss)?.params();
            adam.step(&mut model.params, &grads, cfg.lr)?;
        }
    }
    let hold_inputs: Vec<Tensor> = hold.iter().map(|&i| inputs[i].clone()).collect();
    let flags = model.flags(&hold_inputs)?;
    let correct = hold.iter().zip(&flags).filter(|(&i, &f)| usize::from(f) == labels[i]).count();
    Ok((model, correct as f64 / hold.len() as f64))
}

/// Gradient of the model's intermediate loss with respect to the stem
/// weights, flattened.
///
/// Skipping models use the mean soft gate value; early-exit models use the
/// cross-entropy of the first exit against the uniform distribution.
pub fn gradient_feature(model: WhiteBox, x: &Tensor) -> Result<Vec<f64>> {
    let dim = model.input_dim();
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    let mut g = Graph::new();
    let xi = g.input("x", x.clone().reshape(&[1, dim])?)?;
    let loss = match model {
        WhiteBox::Skip(m) => {
            let fwd = m.build(&mut g, xi, GateMode::Soft)?;
            let mut total = g.mean(fwd.gates[0], Axis::All)?;
            for &gate in &fwd.gates[1..] {
                let v = g.mean(gate, Axis::All)?;
                total = g.add(total, v)?;
            }
            g.scale(total, 1.0 / fwd.gates.len() as f64)?
        }
        WhiteBox::Exit(m) => {
            let exits = m.build(&mut g, xi)?;
            let k = m.config.classes;
            let uniform = g.constant(Tensor::filled(&[1, k], 1.0 / k as f64))?;
            g.cross_entropy(exits[0], uniform)?
        }
    };
    let grads = g.backward(loss)?;
    let stem = grads.param("stem.w").ok_or_else(|| Error::UnknownBinding("stem.w".into()))?;
    Ok(stem.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
}

impl LinearSvm {
    /// Signed margin `w·φ + b`.
    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.w.len() {
            return Err(Error::DimensionMismatch { expected: self.w.len(), got: feature.len() });
        }
        Ok(self.w.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>() + self.b)
    }

    /// Adversarial iff the score is strictly positive; ties are benign.
    pub fn classify(&self, feature: &[f64]) -> Result<bool> {
        Ok(self.score(feature)? > 0.0)
    }

    /// `λ/2·‖w‖² + mean hinge loss`, labels `true` ↦ +1.
    pub fn objective(&self, features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
        let mut hinge = 0.0;
        for (f, &l) in features.iter().zip(labels) {
            let y = if l { 1.0 } else { -1.0 };
            hinge += (1.0 - y * self.score(f)?).max(0.0);
        }
        let norm2: f64 = self.w.iter().map(|v| v * v).sum();
        Ok(self.lambda / 2.0 * norm2 + hinge / features.len() as f64)
    }
}

/// Result of [`train_svm`] with the per-epoch objective of the averaged iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmTraining {
    pub svm: LinearSvm,
    pub objective_per_epoch: Vec<f64>,
}

/// Pegasos: step `1/(λt)` on one sampled example at a time, unregularized
/// bias, and the running average of all iterates.
///
/// At the end of each epoch the reported model moves from its previous
/// value toward the running average by an exact line search on the
/// objective, so the per-epoch objective never rises.
pub fn train_svm(features: &[Vec<f64>], labels: &[bool], lambda: f64, epochs: usize, seed: u64) -> Result<SvmTraining> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} features for {} labels", features.len(), labels.len())));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::SingleClass("svm labels"));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument("features differ in length".into()));
    }
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut avg = LinearSvm { w: vec![0.0; dim], b: 0.0, lambda };
    let mut reported = avg.clone();
    let mut r = rng::stream(rng::derive(seed, "pegasos"));
    let mut t = 0u64;
    let mut objective_per_epoch = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        for i in nn::shuffled(features.len(), &mut r) {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let y = if labels[i] { 1.0 } else { -1.0 };
            let margin = y * (w.iter().zip(&features[i]).map(|(a, c)| a * c).sum::<f64>() + b);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                w.iter_mut().zip(&features[i]).for_each(|(v, &c)| *v += eta * y * c);
                b += eta * y;
            }
            let k = 1.0 / t as f64;
            avg.w.iter_mut().zip(&w).for_each(|(a, &v)| *a += (v - *a) * k);
            avg.b += (b - avg.b) * k;
        }
        reported = segment_minimum(&reported, &avg, features, labels);
        objective_per_epoch.push(reported.objective(features, labels)?);
    }
    Ok(SvmTraining { svm: reported, objective_per_epoch })
}

/// Minimizer of the objective on the segment `from → to`, never worse than
/// `from`. The objective is piecewise quadratic in the step, so checking
/// hinge breakpoints and each piece's stationary point is exact.
fn segment_minimum(from: &LinearSvm, to: &LinearSvm, features: &[Vec<f64>], labels: &[bool]) -> LinearSvm {
    let lambda = from.lambda;
    let n = features.len() as f64;
    let dw: Vec<f64> = to.w.iter().zip(&from.w).map(|(a, b)| a - b).collect();
    let db = to.b - from.b;
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    // Margin of example i at step θ: a[i] + θ·c[i].
    let (mut a, mut c) = (Vec::with_capacity(features.len()), Vec::with_capacity(features.len()));
    for (f, &l) in features.iter().zip(labels) {
        let y = if l { 1.0 } else { -1.0 };
        a.push(y * (dot(&from.w, f) + from.b));
        c.push(y * (dot(&dw, f) + db));
    }
    let (r0, r1, r2) = (dot(&from.w, &from.w), dot(&from.w, &dw), dot(&dw, &dw));
    let objective = |t: f64| {
        let hinge: f64 = a.iter().zip(&c).map(|(ai, ci)| (1.0 - ai - t * ci).max(0.0)).sum();
        lambda / 2.0 * (r0 + 2.0 * t * r1 + t * t * r2) + hinge / n
    };
    let mut knots = vec![0.0, 1.0];
    knots.extend(a.iter().zip(&c).filter(|(_, ci)| **ci != 0.0).map(|(ai, ci)| (1.0 - ai) / ci).filter(|t| *t > 0.0 && *t < 1.0));
    knots.sort_by(f64::total_cmp);
    let mut candidates = knots.clone();
    if r2 > 0.0 {
        for seg in knots.windows(2) {
            let mid = (seg[0] + seg[1]) / 2.0;
            let pull: f64 = a.iter().zip(&c).filter(|(ai, ci)| 1.0 - *ai - mid * *ci > 0.0).map(|(_, ci)| ci).sum();
            candidates.push(((pull / n / lambda - r1) / r2).clamp(seg[0], seg[1]));
        }
    }
    let (mut best_t, mut best) = (0.0, objective(0.0));
    for t in candidates {
        let v = objective(t);
        if v < best {
            (best_t, best) = (t, v);
        }
    }
    LinearSvm { w: from.w.iter().zip(&dw).map(|(w, d)| w + best_t * d).collect(), b: from.b + best_t * db, lambda }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardedResult {
    pub verdict: Verdict,
    pub score: f64,
    /// Full inference trace; absent when inference was stopped.
    pub trace: Option<ExecutionTrace>,
    pub detector_joules: f64,
    /// Detector plus any inference performed, noiseless.
    pub energy_joules: f64,
}

/// FLOPs of computing the feature: one stem forward and one backward.
pub fn detector_flops(model: WhiteBox) -> u64 {
    let (d, w) = match model {
        WhiteBox::Skip(m) => (m.config.input_dim, m.config.width),
        WhiteBox::Exit(m) => (m.config.input_dim, m.config.width),
    };
    2 * nn::dense_flops(d, w)
}

/// Detector cost in joules at the model's per-step FLOPs-to-joules rate.
pub fn detector_joules(model: WhiteBox, energy: &EnergyModel) -> f64 {
    detector_flops(model) as f64 / model.as_adnn().step_flops() as f64 * energy.per_block_joules
}

/// Scores `x`; benign inputs go on to full inference, flagged ones stop.
pub fn guarded_inference(model: WhiteBox, svm: &LinearSvm, energy: &EnergyModel, x: &Tensor) -> Result<GuardedResult> {
    let feature = gradient_feature(model, x)?;
    let score = svm.score(&feature)?;
    let det = detector_joules(model, energy);
    if score > 0.0 {
        return Ok(GuardedResult { verdict: Verdict::Adversarial, score, trace: None, detector_joules: det, energy_joules: det });
    }
    let trace = model.as_adnn().infer(x)?;
    let e = energy.noiseless(&trace)?;
    Ok(GuardedResult { verdict: Verdict::Benign, score, trace: Some(trace), detector_joules: det, energy_joules: det + e })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    /// Adversarial inputs flagged, in %.
    pub detection_pct: f64,
    pub auc: f64,
    /// Benign accuracy lost to false alarms, in percentage points.
    pub acc_drop_pct: f64,
    /// Mean energy reduction on adversarial inputs versus no defense, in %.
    pub adv_energy_dec_pct: f64,
    /// Mean energy overhead on benign inputs versus no defense, in %.
    pub benign_energy_inc_pct: f64,
}

pub fn evaluate_defense(
    model: WhiteBox,
    svm: &LinearSvm,
    energy: &EnergyModel,
    benign: &[Tensor],
    benign_labels: &[usize],
    adversarial: &[Tensor],
) -> Result<DefenseReport> {
    if benign.is_empty() || adversarial.is_empty() {
        return Err(Error::Empty("defense evaluation set"));
    }
    if benign.len() != benign_labels.len() {
        return Err(Error::InvalidArgument("benign inputs and labels differ in length".into()));
    }
    let adnn = model.as_adnn();
    let mut scores = Vec::new();
    let mut labels = Vec::new();

    let (mut plain_b, mut guarded_b, mut acc_plain, mut acc_guarded) = (0.0, 0.0, 0usize, 0usize);
    for (x, &label) in benign.iter().zip(benign_labels) {
        let trace = adnn.infer(x)?;
        plain_b += energy.noiseless(&trace)?;
        acc_plain += usize::from(trace.label() == label);
        let g = guarded_inference(model, svm, energy, x)?;
        guarded_b += g.energy_joules;
        acc_guarded += usize::from(g.trace.as_ref().is_some_and(|t| t.label() == label));
        scores.push(g.score);
        labels.push(false);
    }
    let (mut plain_a, mut guarded_a, mut flagged) = (0.0, 0.0, 0usize);
    for x in adversarial {
        plain_a += energy.noiseless(&adnn.infer(x)?)?;
        let g = guarded_inference(model, svm, energy, x)?;
        guarded_a += g.energy_joules;
        flagged += usize::from(g.verdict == Verdict::Adversarial);
        scores.push(g.score);
        labels.push(true);
    }
    let nb = benign.len() as f64;
    Ok(DefenseReport {
        detection_pct: flagged as f64 / adversarial.len() as f64 * 100.0,
        auc: metrics::auc(&scores, &labels)?,
        acc_drop_pct: (acc_plain as f64 - acc_guarded as f64) / nb * 100.0,
        adv_energy_dec_pct: (plain_a - guarded_a) / plain_a * 100.0,
        benign_energy_inc_pct: (guarded_b - plain_b) / plain_b * 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::{Adnn, ConditionalSkipNet, EarlyExitNet, ExitConfig, SkipConfig};

    fn svm(w: Vec<f64>, b: f64) -> LinearSvm {
        LinearSvm { w, b, lambda: 1.0 }
    }

    #[test]
    fn score_examples() {
        let s = svm(vec![0.0], 0.0);
        assert_eq!(s.score(&[5.0]).unwrap(), 0.0);
        assert!(!s.classify(&[5.0]).unwrap());
        let s = svm(vec![1.0], -1.0);
        assert_eq!(s.score(&[3.0]).unwrap(), 2.0);
        assert!(s.classify(&[3.0]).unwrap());
    }

    #[test]
    fn separable_one_dimensional() {
        let f = vec![vec![-1.0], vec![1.0]];
        let l = [false, true];
        let t = train_svm(&f, &l, 0.01, 200, 0).unwrap();
        assert!(!t.svm.classify(&f[0]).unwrap());
        assert!(t.svm.classify(&f[1]).unwrap());
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let f = vec![vec![-1.0, 0.5], vec![1.0, -0.5], vec![2.0, 1.0]];
        let t = train_svm(&f, &[false, true, true], 1e6, 50, 0).unwrap();
        assert!(t.svm.w.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2);
    }

    #[test]
    fn contradictory_points_do_not_fail() {
        let f = vec![vec![1.0], vec![1.0]];
        let t = train_svm(&f, &[false, true], 0.1, 100, 0).unwrap();
        let preds: Vec<bool> = f.iter().map(|x| t.svm.classify(x).unwrap()).collect();
        assert_eq!(preds.iter().zip([false, true]).filter(|(p, l)| **p == *l).count(), 1);
        assert!(train_svm(&f, &[true, true], 0.1, 10, 0).is_err());
    }

    #[test]
    fn feature_shape_and_determinism() {
        let m = ConditionalSkipNet::new(SkipConfig::default(), 1);
        let x = Tensor::filled(&[64], 0.4);
        let a = gradient_feature(WhiteBox::Skip(&m), &x).unwrap();
        assert_eq!(a.len(), 64 * 16);
        assert_eq!(a, gradient_feature(WhiteBox::Skip(&m), &x).unwrap());
        let e = EarlyExitNet::new(ExitConfig::default(), 1);
        assert_eq!(gradient_feature(WhiteBox::Exit(&e), &x).unwrap().len(), 64 * 16);
    }

    #[test]
    fn guard_energy_composition() {
        let m = ConditionalSkipNet::new(SkipConfig::default(), 1);
        let wb = WhiteBox::Skip(&m);
        let energy = EnergyModel { noise_sigma: 0.0, ..Default::default() };
        let x = Tensor::filled(&[64], 0.4);
        let det = detector_joules(wb, &energy);
        assert_eq!(det, 4096.0 / 1024.0 * 0.5);

        let never = svm(vec![0.0; 1024], -1.0);
        let g = guarded_inference(wb, &never, &energy, &x).unwrap();
        let plain = energy.noiseless(&m.infer(&x).unwrap()).unwrap();
        assert_eq!(g.verdict, Verdict::Benign);
        assert_eq!(g.energy_joules, det + plain);

        let always = svm(vec![0.0; 1024], 1.0);
        let g = guarded_inference(wb, &always, &energy, &x).unwrap();
        assert_eq!(g.verdict, Verdict::Adversarial);
        assert_eq!(g.energy_joules, det);
        assert!(g.trace.is_none());
    }

    #[test]
    fn filter_cost() {
        let f = FilterModel::new(64, 0);
        assert_eq!(f.flops(), 2048 + 3 * 1024 + 64);
    }

    #[test]
    fn filter_needs_both_classes() {
        let x = vec![Tensor::zeros(&[64])];
        assert!(train_filter(&x, &[], &FilterConfig::default()).is_err());
        assert!(train_filter(&[], &x, &FilterConfig::default()).is_err());
    }

    #[test]
    fn untrained_filter_on_identical_classes_is_near_chance() {
        let ds = crate::dataset::generate(200, 4, 0.8, 3).unwrap();
        let (a, b) = ds.inputs.split_at(100);
        let (_, acc) = train_filter(a, b, &FilterConfig { epochs: 20, ..Default::default() }).unwrap();
        assert!((acc - 0.5).abs() <= 0.2, "{acc}");
    }
}
