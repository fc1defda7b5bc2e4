use serde::{Deserialize, Serialize};

use super::{check_dim, Adnn, Decisions, ExecutionTrace, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    pub input_dim: usize,
    pub thresholds: Vec<f64>,
    pub base_flops: u64,
    pub block_flops: u64,
}

/// Weightless conditional-skipping model: block `i` runs iff the input's
/// mean intensity is at least `thresholds[i]`.
///
/// Its logits are `[1 − mean, mean]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAdnn {
    config: ScriptedConfig,
}

pub fn make_scripted(blocks: usize, thresholds: &[f64], base_flops: u64, block_flops: u64) -> Result<ScriptedAdnn> {
    ScriptedAdnn::new(ScriptedConfig { input_dim: crate::dataset::INPUT_DIM, thresholds: thresholds.to_vec(), base_flops, block_flops })
        .and_then(|m| {
            if m.steps() == blocks {
                Ok(m)
            } else {
                Err(Error::InvalidArgument(format!("{blocks} blocks but {} thresholds", thresholds.len())))
            }
        })
}

impl ScriptedAdnn {
    pub fn new(config: ScriptedConfig) -> Result<Self> {
        let t = &config.thresholds;
        if t.is_empty() || t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("thresholds must be non-empty and within [0,1]".into()));
        }
        if t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(format!("thresholds must ascend, got {t:?}")));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &ScriptedConfig {
        &self.config
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.config.thresholds
    }
}

impl Adnn for ScriptedAdnn {
    fn kind(&self) -> ModelKind {
        ModelKind::Scripted
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn steps(&self) -> usize {
        self.config.thresholds.len()
    }

    fn infer(&self, x: &Tensor) -> Result<ExecutionTrace> {
        check_dim(self.config.input_dim, x)?;
        let m = x.mean();
        let gates: Vec<bool> = self.config.thresholds.iter().map(|&t| m >= t).collect();
        let active = gates.iter().filter(|&&g| g).count() as u64;
        Ok(ExecutionTrace {
            kind: ModelKind::Scripted,
            decisions: Decisions::Gates(gates),
            flops: self.config.base_flops + active * self.config.block_flops,
            logits: Tensor::vector(vec![1.0 - m, m]),
        })
    }

    fn step_flops(&self) -> u64 {
        self.config.block_flops
    }

    fn base_flops(&self) -> u64 {
        self.config.base_flops
    }
}
