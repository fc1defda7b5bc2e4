use serde::{Deserialize, Serialize};

use super::{check_dim, Adnn, Decisions, ExecutionTrace, ModelKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, Params};
use crate::rng;
use crate::tensor::Tensor;

const INITIAL_GATE_BIAS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipConfig {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub classes: usize,
    pub gate_threshold: f64,
}

impl Default for SkipConfig {
    fn default() -> Self {
        Self { input_dim: 64, width: 16, blocks: 8, classes: 4, gate_threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    /// Blocks run iff their gate reaches the threshold.
    Hard,
    /// Each residual branch is scaled by its gate value.
    Soft,
    /// Hard decisions in the forward pass, gate-value gradients in the
    /// backward pass (straight-through estimator).
    #[default]
    StraightThrough,
}

/// Residual MLP whose blocks are individually gated.
///
/// `h₀ = relu(stem·x)`, then for each block `i`:
/// `gᵢ = sigmoid(gateᵢ·h₀)` and `h ← h + gᵢ·fc2ᵢ(relu(fc1ᵢ·h))` (soft) or
/// `h ← h + [gᵢ ≥ G_T]·…` (hard). The head maps `h` to class logits.
///
/// Gates read the stem features, so gate values are identical in both modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSkipNet {
    pub config: SkipConfig,
    pub params: Params,
}

/// Graph nodes of one batched forward pass.
#[derive(Clone, Debug)]
pub struct SkipForward {
    pub logits: NodeId,
    /// Per-block gate values, each `[rows, 1]`.
    pub gates: Vec<NodeId>,
    /// `decisions[row][block]`: would the block run in hard mode.
    pub decisions: Vec<Vec<bool>>,
}

impl ConditionalSkipNet {
    pub fn new(config: SkipConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let mut params = Params::new();
        let w = config.width;
        nn::init_dense(&mut params, "stem", config.input_dim, w, &mut r);
        for i in 0..config.blocks {
            nn::init_dense(&mut params, &format!("block{i}.fc1"), w, w, &mut r);
            nn::init_dense(&mut params, &format!("block{i}.fc2"), w, w, &mut r);
            nn::init_dense(&mut params, &format!("gate{i}"), w, 1, &mut r);
            // Gates start open; the sparsity penalty prunes them.
            params.get_mut(&format!("gate{i}.b")).expect("gate").data_mut()[0] = INITIAL_GATE_BIAS;
        }
        nn::init_dense(&mut params, "head", w, config.classes, &mut r);
        Self { config, params }
    }

    /// A learned-architecture twin of the scripted model.
    ///
    /// Stem unit 0 computes the input mean, residual branches leave unit 0
    /// untouched, and gate `i` is `sigmoid(sharpness·(mean − thresholds[i]))`.
    /// Hard decisions therefore match [`super::ScriptedAdnn`] with the same
    /// thresholds, while the soft path stays differentiable.
    pub fn scripted_gates(config: SkipConfig, thresholds: &[f64], sharpness: f64, seed: u64) -> Result<Self> {
        if thresholds.len() != config.blocks || config.width < 2 {
            return Err(Error::InvalidArgument("one threshold per block and width ≥ 2 required".into()));
        }
        let mut m = Self::new(config, seed);
        let (d, w) = (m.config.input_dim, m.config.width);
        let stem = m.params.get_mut("stem.w").expect("stem");
        for k in 0..d {
            stem.data_mut()[k * w] = 1.0 / d as f64;
        }
        for (i, &t) in thresholds.iter().enumerate() {
            let fc2 = m.params.get_mut(&format!("block{i}.fc2.w")).expect("fc2");
            for k in 0..w {
                fc2.data_mut()[k * w] = 0.0;
            }
            let gw = m.params.get_mut(&format!("gate{i}.w")).expect("gate");
            gw.data_mut().iter_mut().for_each(|v| *v = 0.0);
            gw.data_mut()[0] = sharpness;
            m.params.get_mut(&format!("gate{i}.b")).expect("gate").data_mut()[0] = -sharpness * t;
        }
        Ok(m)
    }

    pub fn block_flops(&self) -> u64 {
        2 * nn::dense_flops(self.config.width, self.config.width)
    }

    /// Records a forward pass over `x` (`[rows, input_dim]`) on `g`.
    pub fn build(&self, g: &mut Graph, x: NodeId, mode: GateMode) -> Result<SkipForward> {
        let p = &self.params;
        let rows = g.value(x).rows();
        let stem = nn::dense(g, p, "stem", x)?;
        let h0 = g.relu(stem)?;
        let mut h = h0;
        let mut gates = Vec::with_capacity(self.config.blocks);
        let mut decisions = vec![Vec::with_capacity(self.config.blocks); rows];
        for i in 0..self.config.blocks {
            let gl = nn::dense(g, p, &format!("gate{i}"), h0)?;
            let gate = g.sigmoid(gl)?;
            let fired: Vec<bool> = g.value(gate).data().iter().map(|&v| v >= self.config.gate_threshold).collect();
            for (row, &f) in decisions.iter_mut().zip(&fired) {
                row.push(f);
            }
            let a = nn::dense(g, p, &format!("block{i}.fc1"), h)?;
            let a = g.relu(a)?;
            let r = nn::dense(g, p, &format!("block{i}.fc2"), a)?;
            let scale = match mode {
                GateMode::Soft => gate,
                GateMode::Hard => {
                    let mask = fired.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
                    g.constant(Tensor::new(vec![rows, 1], mask)?)?
                }
                GateMode::StraightThrough => {
                    // gate + (mask − gate) with the correction held constant.
                    let shift = fired.iter().zip(g.value(gate).data()).map(|(&f, &v)| if f { 1.0 - v } else { -v }).collect();
                    let shift = g.constant(Tensor::new(vec![rows, 1], shift)?)?;
                    g.add(gate, shift)?
                }
            };
            let branch = g.mul(scale, r)?;
            h = g.add(h, branch)?;
            gates.push(gate);
        }
        let logits = nn::dense(g, p, "head", h)?;
        Ok(SkipForward { logits, gates, decisions })
    }

    /// Single-input forward pass; returns logits and the trace.
    pub fn forward_skip(&self, x: &Tensor, mode: GateMode) -> Result<(Tensor, ExecutionTrace)> {
        check_dim(self.config.input_dim, x)?;
        let mut g = Graph::new();
        let xi = g.input("x", x.clone().reshape(&[1, self.config.input_dim])?)?;
        let fwd = self.build(&mut g, xi, mode)?;
        let logits = g.value(fwd.logits).clone().reshape(&[self.config.classes])?;
        let gates = fwd.decisions.into_iter().next().expect("one row");
        let active = gates.iter().filter(|&&b| b).count() as u64;
        let trace = ExecutionTrace {
            kind: ModelKind::Skip,
            decisions: Decisions::Gates(gates),
            flops: self.base_flops() + active * self.block_flops(),
            logits: logits.clone(),
        };
        Ok((logits, trace))
    }

    /// Soft gate values for one input, in block order.
    pub fn gate_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        check_dim(self.config.input_dim, x)?;
        let mut g = Graph::new();
        let xi = g.input("x", x.clone().reshape(&[1, self.config.input_dim])?)?;
        let fwd = self.build(&mut g, xi, GateMode::Soft)?;
        Ok(fwd.gates.iter().map(|&id| g.value(id).data()[0]).collect())
    }
}

impl Adnn for ConditionalSkipNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Skip
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn steps(&self) -> usize {
        self.config.blocks
    }

    fn infer(&self, x: &Tensor) -> Result<ExecutionTrace> {
        self.forward_skip(x, GateMode::Hard).map(|(_, t)| t)
    }

    fn step_flops(&self) -> u64 {
        self.block_flops()
    }

    fn base_flops(&self) -> u64 {
        nn::dense_flops(self.config.input_dim, self.config.width) + nn::dense_flops(self.config.width, self.config.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_gate_bias(bias: f64) -> ConditionalSkipNet {
        let mut m = ConditionalSkipNet::new(SkipConfig::default(), 7);
        for i in 0..m.config.blocks {
            m.params.get_mut(&format!("gate{i}.w")).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            m.params.get_mut(&format!("gate{i}.b")).unwrap().data_mut()[0] = bias;
        }
        m
    }

    fn sample_x(seed: u64) -> Tensor {
        crate::dataset::generate(1, 4, 0.5, seed).unwrap().inputs.remove(0)
    }

    #[test]
    fn open_gates_run_every_block() {
        let m = with_gate_bias(10.0);
        let t = m.infer(&sample_x(1)).unwrap();
        assert_eq!(t.decisions, Decisions::Gates(vec![true; 8]));
        assert_eq!(t.flops, m.max_flops());
    }

    #[test]
    fn closed_gates_reduce_to_stem_and_head() {
        let m = with_gate_bias(-10.0);
        let x = sample_x(2);
        let (logits, t) = m.forward_skip(&x, GateMode::Hard).unwrap();
        assert_eq!(t.decisions, Decisions::Gates(vec![false; 8]));
        assert_eq!(t.flops, m.base_flops());
        let mut g = Graph::new();
        let xi = g.input("x", x.clone()).unwrap();
        let s = nn::dense(&mut g, &m.params, "stem", xi).unwrap();
        let h = g.relu(s).unwrap();
        let y = nn::dense(&mut g, &m.params, "head", h).unwrap();
        assert_eq!(g.value(y).data(), logits.data());
    }

    #[test]
    fn hard_decisions_equal_thresholded_soft_gates() {
        let m = ConditionalSkipNet::new(SkipConfig::default(), 3);
        for s in 0..5 {
            let x = sample_x(s);
            let soft = m.gate_values(&x).unwrap();
            let t = m.infer(&x).unwrap();
            let expect: Vec<bool> = soft.iter().map(|&v| v >= 0.5).collect();
            assert_eq!(t.decisions, Decisions::Gates(expect));
        }
    }

    #[test]
    fn saturated_gates_make_soft_equal_hard() {
        for bias in [50.0, -50.0] {
            let m = with_gate_bias(bias);
            let x = sample_x(4);
            let (hard, _) = m.forward_skip(&x, GateMode::Hard).unwrap();
            let (soft, _) = m.forward_skip(&x, GateMode::Soft).unwrap();
            for (a, b) in hard.data().iter().zip(soft.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_flops_hand_count() {
        let m = ConditionalSkipNet::new(SkipConfig { width: 8, ..Default::default() }, 0);
        assert_eq!(m.block_flops(), 256);
        assert_eq!(m.base_flops(), 2 * 64 * 8 + 2 * 8 * 4);
    }

    #[test]
    fn scripted_gates_match_scripted_model() {
        let taus: Vec<f64> = (0..8).map(|i| 0.1 + 0.1 * i as f64).collect();
        let m = ConditionalSkipNet::scripted_gates(SkipConfig::default(), &taus, 40.0, 5).unwrap();
        let s = super::super::make_scripted(8, &taus, 0, 1).unwrap();
        for level in [0.0, 0.05, 0.13, 0.37, 0.52, 0.77, 0.96] {
            let x = Tensor::filled(&[64], level);
            let a = m.infer(&x).unwrap().decisions;
            let b = s.infer(&x).unwrap().decisions;
            assert_eq!(a, b, "level {level}");
        }
    }
}
