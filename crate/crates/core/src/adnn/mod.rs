//! Adaptive networks: conditional-skipping, early-exit, and a scripted
//! oracle model, with execution traces and FLOPs accounting.
//!
//! FLOPs convention: a dense map `in → out` costs `2·in·out`; activations,
//! pooling and gate networks cost nothing toward the trace. Gates always run,
//! so they would only shift the constant.

mod exit;
mod scripted;
mod skip;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use exit::{EarlyExitNet, ExitConfig};
pub use scripted::{make_scripted, ScriptedAdnn, ScriptedConfig};
pub use skip::{ConditionalSkipNet, GateMode, SkipConfig, SkipForward};
pub use train::{train_exit, train_skip, ExitTrainReport, SkipTrainReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Skip,
    Exit,
    Scripted,
}

/// What one inference did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decisions {
    /// Per-block execution flags of a conditional-skipping model.
    Gates(Vec<bool>),
    /// Index of the exit that produced the output.
    Exit(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub kind: ModelKind,
    pub decisions: Decisions,
    pub flops: u64,
    pub logits: Tensor,
}

impl ExecutionTrace {
    /// Blocks executed (skipping) or segments run through (early exit).
    pub fn active_steps(&self) -> usize {
        match &self.decisions {
            Decisions::Gates(g) => g.iter().filter(|&&b| b).count(),
            Decisions::Exit(i) => i + 1,
        }
    }

    pub fn label(&self) -> usize {
        crate::nn::argmax(self.logits.data())
    }
}

/// Common inference surface of every adaptive model.
pub trait Adnn {
    fn kind(&self) -> ModelKind;

    fn input_dim(&self) -> usize;

    /// Number of blocks (skipping) or exits (early exit).
    fn steps(&self) -> usize;

    /// Deployed (hard-decision) inference on one input.
    fn infer(&self, x: &Tensor) -> Result<ExecutionTrace>;

    /// FLOPs of one block or one segment with its exit head.
    fn step_flops(&self) -> u64;

    /// FLOPs spent regardless of decisions.
    fn base_flops(&self) -> u64;

    fn max_flops(&self) -> u64 {
        self.base_flops() + self.steps() as u64 * self.step_flops()
    }

    fn min_flops(&self) -> u64 {
        match self.kind() {
            ModelKind::Exit => self.base_flops() + self.step_flops(),
            _ => self.base_flops(),
        }
    }

    /// Recomputes a trace's FLOPs from its decisions.
    fn flops_of_trace(&self, trace: &ExecutionTrace) -> Result<u64> {
        let compatible = match (&trace.decisions, self.kind()) {
            (Decisions::Gates(g), ModelKind::Skip | ModelKind::Scripted) => g.len() == self.steps(),
            (Decisions::Exit(i), ModelKind::Exit) => *i < self.steps(),
            _ => false,
        };
        if trace.kind != self.kind() || !compatible {
            return Err(Error::ForeignTrace(format!(
                "{:?} trace with {:?} on a {:?} model of {} steps",
                trace.kind,
                trace.decisions,
                self.kind(),
                self.steps()
            )));
        }
        Ok(self.base_flops() + trace.active_steps() as u64 * self.step_flops())
    }
}

fn check_dim(expected: usize, x: &Tensor) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: x.len() });
    }
    Ok(())
}

/// Shannon entropy `−Σ p ln p` in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(total));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Any model, in its on-disk form `{ "kind", "config", "params" }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnyModel {
    Skip(ConditionalSkipNet),
    Exit(EarlyExitNet),
    Scripted(ScriptedAdnn),
}

impl AnyModel {
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

    fn inner(&self) -> &dyn Adnn {
        match self {
            AnyModel::Skip(m) => m,
            AnyModel::Exit(m) => m,
            AnyModel::Scripted(m) => m,
        }
    }
}

impl Adnn for AnyModel {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn steps(&self) -> usize {
        self.inner().steps()
    }
    fn infer(&self, x: &Tensor) -> Result<ExecutionTrace> {
        self.inner().infer(x)
    }
    fn step_flops(&self) -> u64 {
        self.inner().step_flops()
    }
    fn base_flops(&self) -> u64 {
        self.inner().base_flops()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(entropy(&[0.5, 0.6]), Err(Error::NotNormalized(_))));
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn model_files_round_trip() {
        let skip = ConditionalSkipNet::new(SkipConfig { width: 4, blocks: 2, ..Default::default() }, 1);
        let m = AnyModel::Skip(skip);
        let text = m.to_json().unwrap();
        assert!(text.starts_with("{\"kind\":\"skip\",\"config\":"));
        let back = AnyModel::from_json(&text).unwrap();
        let x = Tensor::filled(&[64], 0.3);
        assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());

        let s = AnyModel::Scripted(make_scripted(2, &[0.2, 0.4], 10, 5).unwrap());
        let back = AnyModel::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.kind(), ModelKind::Scripted);
    }

    #[test]
    fn foreign_trace_is_rejected() {
        let s = make_scripted(2, &[0.2, 0.4], 10, 5).unwrap();
        let e = EarlyExitNet::new(ExitConfig { width: 4, segments: 2, ..Default::default() }, 0);
        let t = e.infer(&Tensor::filled(&[64], 0.5)).unwrap();
        assert!(matches!(s.flops_of_trace(&t), Err(Error::ForeignTrace(_))));
        let s3 = make_scripted(3, &[0.2, 0.4, 0.6], 10, 5).unwrap();
        let t2 = s.infer(&Tensor::filled(&[64], 0.5)).unwrap();
        assert!(s3.flops_of_trace(&t2).is_err());
    }
}
