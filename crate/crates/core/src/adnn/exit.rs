use serde::{Deserialize, Serialize};

use super::{check_dim, entropy, Adnn, Decisions, ExecutionTrace, ModelKind};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::nn::{self, Params};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitConfig {
    pub input_dim: usize,
    pub width: usize,
    pub segments: usize,
    pub classes: usize,
    pub entropy_threshold: f64,
}

impl Default for ExitConfig {
    fn default() -> Self {
        Self { input_dim: 64, width: 16, segments: 4, classes: 4, entropy_threshold: 0.3 }
    }
}

/// Residual MLP with a classifier head after every segment. Inference
/// returns at the first exit whose prediction entropy is below the
/// threshold, or at the last exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitNet {
    pub config: ExitConfig,
    pub params: Params,
}

impl EarlyExitNet {
    pub fn new(config: ExitConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let mut params = Params::new();
        let w = config.width;
        nn::init_dense(&mut params, "stem", config.input_dim, w, &mut r);
        for i in 0..config.segments {
            nn::init_dense(&mut params, &format!("seg{i}.fc1"), w, w, &mut r);
            nn::init_dense(&mut params, &format!("seg{i}.fc2"), w, w, &mut r);
            nn::init_dense(&mut params, &format!("exit{i}"), w, config.classes, &mut r);
        }
        Self { config, params }
    }

    /// Records all exits' logits for `x` (`[rows, input_dim]`).
    pub fn build(&self, g: &mut Graph, x: NodeId) -> Result<Vec<NodeId>> {
        let p = &self.params;
        let stem = nn::dense(g, p, "stem", x)?;
        let mut h = g.relu(stem)?;
        let mut exits = Vec::with_capacity(self.config.segments);
        for i in 0..self.config.segments {
            let a = nn::dense(g, p, &format!("seg{i}.fc1"), h)?;
            let a = g.relu(a)?;
            let r = nn::dense(g, p, &format!("seg{i}.fc2"), a)?;
            h = g.add(h, r)?;
            exits.push(nn::dense(g, p, &format!("exit{i}"), h)?);
        }
        Ok(exits)
    }

    /// Softmax output of every exit for one input.
    pub fn exit_probabilities(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        check_dim(self.config.input_dim, x)?;
        let mut g = Graph::new();
        let xi = g.input("x", x.clone().reshape(&[1, self.config.input_dim])?)?;
        self.build(&mut g, xi)?
            .into_iter()
            .map(|id| {
                let p = g.softmax(id)?;
                g.value(p).clone().reshape(&[self.config.classes])
            })
            .collect()
    }

    /// Returns the chosen exit's softmax output and the trace.
    pub fn forward_exit(&self, x: &Tensor) -> Result<(Tensor, ExecutionTrace)> {
        let probs = self.exit_probabilities(x)?;
        let last = probs.len() - 1;
        let mut chosen = last;
        for (i, p) in probs.iter().enumerate().take(last) {
            if entropy(p.data())? < self.config.entropy_threshold {
                chosen = i;
                break;
            }
        }
        let p = probs[chosen].clone();
        let trace = ExecutionTrace {
            kind: ModelKind::Exit,
            decisions: Decisions::Exit(chosen),
            flops: self.base_flops() + (chosen as u64 + 1) * self.step_flops(),
            logits: p.clone(),
        };
        Ok((p, trace))
    }
}

impl Adnn for EarlyExitNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Exit
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn steps(&self) -> usize {
        self.config.segments
    }

    fn infer(&self, x: &Tensor) -> Result<ExecutionTrace> {
        self.forward_exit(x).map(|(_, t)| t)
    }

    /// One segment (two dense maps) plus its exit head.
    fn step_flops(&self) -> u64 {
        let w = self.config.width;
        2 * nn::dense_flops(w, w) + nn::dense_flops(w, self.config.classes)
    }

    fn base_flops(&self) -> u64 {
        nn::dense_flops(self.config.input_dim, self.config.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(th: f64) -> EarlyExitNet {
        EarlyExitNet::new(ExitConfig { entropy_threshold: th, ..Default::default() }, 11)
    }

    fn xs() -> Vec<Tensor> {
        crate::dataset::generate(10, 4, 0.8, 2).unwrap().inputs
    }

    #[test]
    fn zero_threshold_never_exits_early() {
        let m = net(0.0);
        for x in xs() {
            assert_eq!(m.infer(&x).unwrap().decisions, Decisions::Exit(3));
        }
    }

    #[test]
    fn threshold_above_max_entropy_exits_first() {
        let m = net(4f64.ln() + 1.0);
        for x in xs() {
            let t = m.infer(&x).unwrap();
            assert_eq!(t.decisions, Decisions::Exit(0));
            assert_eq!(t.flops, m.min_flops());
        }
    }

    #[test]
    fn uniform_two_class_exit_continues() {
        // Zeroed exit-0 head emits [0.5, 0.5]: entropy ln 2 ≥ 0.5.
        let mut m = EarlyExitNet::new(ExitConfig { classes: 2, entropy_threshold: 0.5, ..Default::default() }, 1);
        m.params.get_mut("exit0.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::filled(&[64], 0.4);
        let probs = m.exit_probabilities(&x).unwrap();
        assert_eq!(probs[0].data(), &[0.5, 0.5]);
        assert_ne!(m.infer(&x).unwrap().decisions, Decisions::Exit(0));
    }

    #[test]
    fn flops_hand_count() {
        let m = net(0.3);
        // stem 2·64·16; per exit: two 16×16 maps and a 16×4 head.
        assert_eq!(m.base_flops(), 2048);
        assert_eq!(m.step_flops(), 2 * 512 + 128);
        let t = m.infer(&xs()[0]).unwrap();
        assert_eq!(m.flops_of_trace(&t).unwrap(), t.flops);
        assert_eq!(m.max_flops(), 2048 + 4 * 1152);
    }

    #[test]
    fn raising_threshold_never_delays_exit() {
        let base = net(0.0);
        for x in xs() {
            let mut last = usize::MAX;
            for th in [0.0, 0.2, 0.5, 0.9, 1.2, 1.5] {
                let mut m = base.clone();
                m.config.entropy_threshold = th;
                let Decisions::Exit(i) = m.infer(&x).unwrap().decisions else { unreachable!() };
                assert!(i <= last);
                last = i;
            }
        }
    }
}
