//! Experiment configuration. Every section has defaults, so `{}` is a
//! valid config; unknown keys are rejected.

use std::path::{Path, PathBuf};

use ael_core::adnn::{ExitConfig, SkipConfig, TrainConfig};
use ael_core::corruptions::CorruptionSpec;
use ael_core::defense::FilterConfig;
use ael_core::energy::{EnergyModel, MeasurementProtocol};
use ael_core::estimator::EstimatorConfig;
use ael_core::rng;
use ael_core::testgen::{IlfoConfig, TestGenConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    /// Output directory; `--out` takes precedence. Not part of the hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub adnn: AdnnSpec,
    pub energy: EnergyModel,
    pub measurement: MeasurementProtocol,
    pub estimator: EstimatorConfig,
    pub testgen: TestGenConfig,
    pub ilfo: IlfoConfig,
    pub surrogate: SurrogateSpec,
    pub transfer: TransferSpec,
    pub robustness: RobustnessSpec,
    pub corruptions: Vec<CorruptionSpec>,
    pub defense: DefenseSpec,
    pub correlate: CorrelateSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub examples: usize,
    pub classes: usize,
    pub noise_span: f64,
    /// Inputs measured to train the estimator.
    pub probes: usize,
    /// Minimum-energy dataset inputs used as test seeds.
    pub seeds: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { examples: 600, classes: 4, noise_span: 0.8, probes: 500, seeds: 50 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Skip,
    Exit,
    /// Weightless staircase model; black-box only.
    Scripted,
    /// Skip net whose gates reproduce the scripted staircase.
    ScriptedGates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedSpec {
    pub thresholds: Vec<f64>,
    pub base_flops: u64,
    pub block_flops: u64,
    /// Gate slope of the `scripted_gates` analogue.
    pub sharpness: f64,
}

impl Default for ScriptedSpec {
    fn default() -> Self {
        Self { thresholds: (1..=8).map(|i| i as f64 / 10.0).collect(), base_flops: 2176, block_flops: 1024, sharpness: 40.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdnnSpec {
    pub kind: ModelChoice,
    pub skip: SkipConfig,
    pub exit: ExitConfig,
    pub scripted: ScriptedSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSpec {
    pub arch: SkipConfig,
    pub train: TrainConfig,
    /// Dataset inputs labelled by the target for surrogate training.
    pub train_inputs: usize,
    pub seeds: usize,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        // Label-only training leaves gates open unless skipping is pushed harder.
        Self { arch: SkipConfig::default(), train: TrainConfig { sparsity: 0.2, ..TrainConfig::default() }, train_inputs: 300, seeds: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    /// Model attacked with ILFO; `model.json` in the output directory if absent.
    pub base: Option<PathBuf>,
    /// Model the tests are replayed on; defaults like `base`.
    pub target: Option<PathBuf>,
    pub seeds: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self { base: None, target: None, seeds: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSpec {
    /// L2 radius of admissible input-based perturbations.
    pub budget: f64,
    pub seeds: usize,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self { budget: 5.0, seeds: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSpec {
    pub filter: FilterConfig,
    /// Universal inputs generated as the filter's noisy class.
    pub noisy_inputs: usize,
    /// Restarts per noisy input.
    pub noisy_restarts: usize,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    /// Benign and adversarial inputs, each split half for training the SVM.
    pub detector_inputs: usize,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            noisy_inputs: 50,
            noisy_restarts: 1,
            svm_lambda: 0.01,
            svm_epochs: 100,
            detector_inputs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateSpec {
    pub permutations: usize,
}

impl Default for CorrelateSpec {
    fn default() -> Self {
        Self { permutations: 1000 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_read(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
    }

    /// Copies seeds derived from the root into every section, so the
    /// effective config names every stream it uses.
    pub fn derive_seeds(&mut self) {
        let root = self.seed;
        self.adnn.train.seed = rng::derive(root, "adnn-train");
        self.energy.seed = rng::derive(root, "energy");
        self.estimator.seed = rng::derive(root, "estimator");
        self.testgen.seed = rng::derive(root, "testgen");
        self.surrogate.train.seed = rng::derive(root, "surrogate-train");
        self.defense.filter.seed = rng::derive(root, "filter");
        for (i, c) in self.corruptions.iter_mut().enumerate() {
            c.seed = rng::derive_indexed(rng::derive(root, "corruptions"), i as u64);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Schema(m));
        let d = &self.dataset;
        if d.examples == 0 || d.classes < 2 || d.probes < 2 || d.seeds == 0 {
            return bad(format!("dataset section out of range: {d:?}"));
        }
        if !(0.0..=1.0).contains(&d.noise_span) {
            return bad(format!("noise_span must be within [0,1], got {}", d.noise_span));
        }
        if d.seeds > d.examples {
            return bad(format!("{} seeds requested from {} examples", d.seeds, d.examples));
        }
        self.energy.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        self.measurement.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        self.testgen.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        for c in &self.corruptions {
            c.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        }
        let e = &self.estimator;
        if e.epochs == 0 || e.batch_size == 0 || !(0.0..1.0).contains(&e.validation_fraction) {
            return bad(format!("estimator section out of range: {e:?}"));
        }
        if !(self.defense.svm_lambda > 0.0) || self.defense.detector_inputs < 4 || self.defense.noisy_inputs == 0 {
            return bad(format!("defense section out of range: {:?}", self.defense));
        }
        if self.robustness.budget < 0.0 {
            return bad(format!("robustness budget must be non-negative, got {}", self.robustness.budget));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the effective config, output
    /// directory excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { out_dir: None, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
