//! Simulated inference energy: a step-wise joule model over execution
//! traces and the repeat-and-reject measurement protocol.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adnn::{Adnn, Decisions, ExecutionTrace};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    /// E₀, spent by every inference.
    pub base_joules: f64,
    /// e_b, per executed block.
    pub per_block_joules: f64,
    /// Per-segment costs for early-exit models; falls back to
    /// `per_block_joules` for each segment when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_segment_joules: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { base_joules: 1.0, per_block_joules: 0.5, per_segment_joules: None, noise_sigma: 0.05, seed: 0 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let segs_ok = self.per_segment_joules.as_ref().is_none_or(|s| !s.is_empty() && s.iter().all(|&v| v > 0.0));
        if !(self.base_joules > 0.0 && self.per_block_joules > 0.0 && self.noise_sigma >= 0.0 && segs_ok) {
            return Err(Error::InvalidArgument(format!("energy model out of range: {self:?}")));
        }
        Ok(())
    }

    /// Step value of a trace, before noise.
    pub fn noiseless(&self, trace: &ExecutionTrace) -> Result<f64> {
        match (&trace.decisions, &self.per_segment_joules) {
            (Decisions::Exit(i), Some(segs)) => {
                if *i >= segs.len() {
                    return Err(Error::InvalidArgument(format!("exit {i} beyond {} segment costs", segs.len())));
                }
                Ok(self.base_joules + segs[..=*i].iter().sum::<f64>())
            }
            _ => Ok(self.base_joules + self.per_block_joules * trace.active_steps() as f64),
        }
    }

    /// Joules for `k` active steps under the uniform per-step cost.
    pub fn step_value(&self, k: usize) -> f64 {
        self.base_joules + self.per_block_joules * k as f64
    }
}

/// One noisy reading for `trace`, clamped at zero.
pub fn energy_of_trace(model: &EnergyModel, trace: &ExecutionTrace, draw: &mut Rng) -> Result<f64> {
    let clean = model.noiseless(trace)?;
    if model.noise_sigma == 0.0 {
        return Ok(clean);
    }
    let normal = Normal::new(0.0, model.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((clean + normal.sample(draw)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementProtocol {
    pub repetitions: usize,
    pub rejection_factor: f64,
}

impl Default for MeasurementProtocol {
    fn default() -> Self {
        Self { repetitions: 20, rejection_factor: 1.5 }
    }
}

impl MeasurementProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 || self.rejection_factor <= 1.0 {
            return Err(Error::InvalidArgument(format!("measurement protocol out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyMeasurement {
    pub raw: Vec<f64>,
    pub retained: Vec<f64>,
    /// F(x), the mean of the retained samples.
    pub mean: f64,
}

pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Keeps samples at most `rejection_factor · median`, in their original order.
pub fn filter_outliers(samples: &[f64], protocol: &MeasurementProtocol) -> Result<Vec<f64>> {
    let limit = protocol.rejection_factor * median(samples)?;
    Ok(samples.iter().copied().filter(|&v| v <= limit).collect())
}

/// Runs inference `repetitions` times, reads energy each time and averages
/// the retained readings. The noise stream is keyed by the energy model's
/// seed and the input's bits.
pub fn measure_energy<M: Adnn + ?Sized>(
    adnn: &M,
    model: &EnergyModel,
    x: &Tensor,
    protocol: &MeasurementProtocol,
) -> Result<EnergyMeasurement> {
    protocol.validate()?;
    model.validate()?;
    let mut draw = rng::stream(rng::derive_from_values(model.seed, x.data()));
    let mut raw = Vec::with_capacity(protocol.repetitions);
    for _ in 0..protocol.repetitions {
        let trace = adnn.infer(x)?;
        raw.push(energy_of_trace(model, &trace, &mut draw)?);
    }
    // Never empty: the lower half of the readings sits at or below the median.
    let retained = filter_outliers(&raw, protocol)?;
    let mean = retained.iter().sum::<f64>() / retained.len() as f64;
    Ok(EnergyMeasurement { raw, retained, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::{make_scripted, ModelKind};

    fn trace(decisions: Decisions) -> ExecutionTrace {
        let kind = if matches!(decisions, Decisions::Exit(_)) { ModelKind::Exit } else { ModelKind::Scripted };
        ExecutionTrace { kind, decisions, flops: 0, logits: Tensor::vector(vec![0.5, 0.5]) }
    }

    fn quiet() -> EnergyModel {
        EnergyModel { noise_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn step_values() {
        let mut r = rng::stream(0);
        let two = trace(Decisions::Gates(vec![true, true, false, false]));
        assert_eq!(energy_of_trace(&quiet(), &two, &mut r).unwrap(), 2.0);
        let none = trace(Decisions::Gates(vec![false; 4]));
        assert_eq!(energy_of_trace(&quiet(), &none, &mut r).unwrap(), 1.0);
        let m = EnergyModel { per_segment_joules: Some(vec![1.0; 4]), ..quiet() };
        assert_eq!(energy_of_trace(&m, &trace(Decisions::Exit(3)), &mut r).unwrap(), 5.0);
    }

    #[test]
    fn noise_never_negative() {
        let m = EnergyModel { base_joules: 0.01, noise_sigma: 1.0, ..Default::default() };
        let mut r = rng::stream(1);
        let t = trace(Decisions::Gates(vec![false]));
        assert!((0..2000).all(|_| energy_of_trace(&m, &t, &mut r).unwrap() >= 0.0));
    }

    #[test]
    fn outlier_examples() {
        let p = MeasurementProtocol::default();
        assert_eq!(filter_outliers(&[10.0, 10.0, 10.0, 16.0], &p).unwrap(), vec![10.0; 3]);
        assert_eq!(filter_outliers(&[5.0; 4], &p).unwrap(), vec![5.0; 4]);
        assert_eq!(filter_outliers(&[1.0, 2.0, 3.0], &p).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(filter_outliers(&[], &p), Err(Error::Empty(_))));
    }

    #[test]
    fn scripted_measurement_is_exact_without_noise() {
        let s = make_scripted(4, &[0.2, 0.4, 0.6, 0.8], 100, 256).unwrap();
        let x = Tensor::filled(&[64], 0.5);
        let m = measure_energy(&s, &quiet(), &x, &MeasurementProtocol::default()).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.raw.len(), 20);
    }

    #[test]
    fn single_repetition_is_the_sample() {
        let s = make_scripted(4, &[0.2, 0.4, 0.6, 0.8], 100, 256).unwrap();
        let x = Tensor::filled(&[64], 0.5);
        let p = MeasurementProtocol { repetitions: 1, ..Default::default() };
        let m = measure_energy(&s, &EnergyModel::default(), &x, &p).unwrap();
        assert_eq!(m.mean, m.raw[0]);
    }

    #[test]
    fn many_repetitions_converge() {
        let s = make_scripted(4, &[0.2, 0.4, 0.6, 0.8], 100, 256).unwrap();
        let x = Tensor::filled(&[64], 0.5);
        let e = EnergyModel { base_joules: 10.0, noise_sigma: 0.1, ..Default::default() };
        let p = MeasurementProtocol { repetitions: 1000, ..Default::default() };
        let m = measure_energy(&s, &e, &x, &p).unwrap();
        assert!((m.mean - 11.0).abs() < 0.02, "{}", m.mean);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(MeasurementProtocol { repetitions: 0, ..Default::default() }.validate().is_err());
        assert!(MeasurementProtocol { rejection_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(EnergyModel { per_block_joules: 0.0, ..Default::default() }.validate().is_err());
    }
}
