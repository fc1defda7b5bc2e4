//! The twelve subcommands.

use std::path::{Path, PathBuf};

use ael_core::adnn::{train_exit, train_skip, Adnn, AnyModel, ConditionalSkipNet, EarlyExitNet, ScriptedAdnn, ScriptedConfig, SkipConfig};
use ael_core::corruptions::{corrupt, CorruptionKind, CorruptionSpec};
use ael_core::dataset::{self, LabeledDataset, INPUT_DIM};
use ael_core::defense::{self, DefenseReport};
use ael_core::energy::measure_energy;
use ael_core::estimator::{train_estimator, Estimator, EstimatorReport};
use ael_core::metrics::{self, RobustnessScores, TransferMetrics, TransferRecord};
use ael_core::rng;
use ael_core::testgen::{self, ilfo_attack, Mode, TestGenConfig, WhiteBox};
use ael_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::{self, Sink};
use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainAdnn,
    Measure,
    TrainEstimator,
    Generate,
    Ilfo,
    Surrogate,
    Transfer,
    Evaluate,
    Robustness,
    Defend,
    Correlate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainAdnn => "train-adnn",
            Stage::Measure => "measure",
            Stage::TrainEstimator => "train-estimator",
            Stage::Generate => "generate",
            Stage::Ilfo => "ilfo",
            Stage::Surrogate => "surrogate",
            Stage::Transfer => "transfer",
            Stage::Evaluate => "evaluate",
            Stage::Robustness => "robustness",
            Stage::Defend => "defend",
            Stage::Correlate => "correlate",
            Stage::Report => "report",
        }
    }

    /// Upstream artifacts the stage reads from the output directory.
    fn inputs(self, cfg: &ExperimentConfig) -> Vec<&'static str> {
        match self {
            Stage::TrainAdnn | Stage::Evaluate | Stage::Report => vec![],
            Stage::Measure | Stage::Ilfo | Stage::Surrogate => vec![DATASET, MODEL],
            Stage::TrainEstimator => vec![MEASUREMENTS],
            Stage::Generate | Stage::Robustness | Stage::Defend => vec![DATASET, MODEL, ESTIMATOR],
            Stage::Transfer => {
                let mut v = vec![DATASET];
                if cfg.transfer.base.is_none() || cfg.transfer.target.is_none() {
                    v.push(MODEL);
                }
                v
            }
            Stage::Correlate => vec![MEASUREMENTS, ESTIMATOR],
        }
    }
}

pub const DATASET: &str = "dataset.json";
pub const MODEL: &str = "model.json";
pub const MEASUREMENTS: &str = "measurements.json";
pub const ESTIMATOR: &str = "estimator.json";

/// Artifacts the report stage looks for, in report order.
const KNOWN: [&str; 14] = [
    "adnn_report.json",
    MEASUREMENTS,
    "estimator_report.json",
    "generate_input_based.json",
    "generate_universal.json",
    "ilfo.json",
    "surrogate.json",
    "transfer.json",
    "evaluate.json",
    "robustness.json",
    "defense.json",
    "correlate.json",
    DATASET,
    MODEL,
];

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dry_run: bool,
    pub mode: Option<Mode>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

/// Config after flag overrides and seed derivation.
pub fn effective_config(path: &Path, opts: &Options) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.derive_seeds();
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(stage: Stage, config: &Path, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = effective_config(config, opts)?;
    let dir = opts.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let sink = Sink { dir, config_hash: cfg.hash(), root_seed: cfg.seed };
    if opts.dry_run {
        for name in stage.inputs(&cfg) {
            let p = sink.path(name);
            if !p.is_file() {
                return Err(CliError::MissingFile(p));
            }
        }
        for p in [&cfg.transfer.base, &cfg.transfer.target].into_iter().flatten() {
            if stage == Stage::Transfer && !p.is_file() {
                return Err(CliError::MissingFile(p.clone()));
            }
        }
        return Ok(Outcome { summary: format!("dry run, config valid (hash {})", &sink.config_hash[..12]), artifacts: vec![] });
    }
    let mode = opts.mode.unwrap_or(cfg.testgen.mode);
    let ctx = Ctx { cfg, sink, mode };
    match stage {
        Stage::TrainAdnn => ctx.train_adnn(),
        Stage::Measure => ctx.measure(),
        Stage::TrainEstimator => ctx.train_estimator(),
        Stage::Generate => ctx.generate(),
        Stage::Ilfo => ctx.ilfo(),
        Stage::Surrogate => ctx.surrogate(),
        Stage::Transfer => ctx.transfer(),
        Stage::Evaluate => ctx.evaluate(),
        Stage::Robustness => ctx.robustness(),
        Stage::Defend => ctx.defend(),
        Stage::Correlate => ctx.correlate(),
        Stage::Report => ctx.report(),
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetArtifact {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    difficulty: Vec<f64>,
}

impl DatasetArtifact {
    fn from_dataset(ds: &LabeledDataset) -> Self {
        Self { inputs: ds.inputs.iter().map(|t| t.data().to_vec()).collect(), labels: ds.labels.clone(), difficulty: ds.difficulty.clone() }
    }

    fn into_dataset(self) -> Result<LabeledDataset, CliError> {
        if self.inputs.len() != self.labels.len() || self.inputs.len() != self.difficulty.len() {
            return Err(CliError::Schema("dataset inputs, labels and difficulty differ in length".into()));
        }
        Ok(LabeledDataset { inputs: tensors(self.inputs), labels: self.labels, difficulty: self.difficulty })
    }
}

fn tensors(rows: Vec<Vec<f64>>) -> Vec<Tensor> {
    rows.into_iter().map(Tensor::vector).collect()
}

fn rows_of(xs: &[Tensor]) -> Vec<Vec<f64>> {
    xs.iter().map(|t| t.data().to_vec()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MeasuredRow {
    index: usize,
    energy_j: f64,
    flops: u64,
    active_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct Measurements {
    rows: Vec<MeasuredRow>,
    inputs: Vec<Vec<f64>>,
}

/// One input-based test result.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TestRow {
    seed_index: usize,
    orig_energy_j: f64,
    test_energy_j: f64,
    energy_increase_percent: f64,
    flops_orig: u64,
    flops_test: u64,
    #[serde(rename = "IncRF (reduction-recovered fraction)")]
    inc_rf: Option<f64>,
    psnr_db: f64,
    ssim: f64,
    sq_diff: f64,
    iterations: usize,
    final_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TestSummary {
    seeds: usize,
    mean_energy_increase_percent: f64,
    increased_fraction: f64,
    #[serde(rename = "mean IncRF (reduction-recovered fraction)")]
    mean_inc_rf: Option<f64>,
    avg_squared_difference: f64,
    mean_psnr_db: f64,
    mean_ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UniversalResult {
    energy_j: f64,
    flops: u64,
    max_noiseless_energy_j: f64,
    loss: f64,
    restart_losses: Vec<f64>,
    input: Vec<f64>,
}

struct Ctx {
    cfg: ExperimentConfig,
    sink: Sink,
    /// Generation mode; `--mode` overrides the config without changing its hash.
    mode: Mode,
}

impl Ctx {
    fn seed(&self, label: &str) -> u64 {
        rng::derive(self.cfg.seed, label)
    }

    fn dataset(&self) -> Result<LabeledDataset, CliError> {
        let d = &self.cfg.dataset;
        Ok(dataset::generate(d.examples, d.classes, d.noise_span, self.seed("dataset"))?)
    }

    fn load_dataset(&self) -> Result<LabeledDataset, CliError> {
        artifacts::read::<DatasetArtifact>(&self.sink.path(DATASET))?.into_dataset()
    }

    fn load_model(&self, path: &Path, ds: Option<&LabeledDataset>) -> Result<AnyModel, CliError> {
        let m: AnyModel = artifacts::read(path)?;
        if let Some(ds) = ds {
            let dim = ds.inputs.first().map_or(INPUT_DIM, Tensor::len);
            if m.input_dim() != dim {
                return Err(CliError::Incompatible(format!("{} expects {}-dim inputs, dataset has {dim}", path.display(), m.input_dim())));
            }
        }
        Ok(m)
    }

    fn load_estimator(&self, model: &AnyModel) -> Result<Estimator, CliError> {
        let est: Estimator = artifacts::read(&self.sink.path(ESTIMATOR))?;
        if est.input_dim != model.input_dim() {
            return Err(CliError::Incompatible(format!("estimator expects {}-dim inputs, model {}", est.input_dim, model.input_dim())));
        }
        Ok(est)
    }

    fn build_model(&self, ds: &LabeledDataset) -> Result<(AnyModel, Value), CliError> {
        let a = &self.cfg.adnn;
        let init = self.seed("adnn-init");
        let check = |dim: usize| {
            if dim != INPUT_DIM {
                return Err(CliError::Incompatible(format!("model input_dim {dim} but dataset images have {INPUT_DIM} pixels")));
            }
            Ok(())
        };
        Ok(match a.kind {
            ModelChoice::Skip => {
                check(a.skip.input_dim)?;
                let mut m = ConditionalSkipNet::new(SkipConfig { classes: self.cfg.dataset.classes, ..a.skip.clone() }, init);
                let r = train_skip(&mut m, ds, &a.train)?;
                let report = json!({
                    "kind": "skip",
                    "accuracy": r.accuracy,
                    "mean_active_blocks": r.mean_active(),
                    "distinct_active_counts": r.distinct_active(),
                    "final_loss": r.final_loss,
                });
                (AnyModel::Skip(m), report)
            }
            ModelChoice::Exit => {
                check(a.exit.input_dim)?;
                let exit = ael_core::adnn::ExitConfig { classes: self.cfg.dataset.classes, ..a.exit.clone() };
                let mut m = EarlyExitNet::new(exit, init);
                let r = train_exit(&mut m, ds, &a.train)?;
                let mut used = r.exit_indices.clone();
                used.sort_unstable();
                used.dedup();
                let report = json!({
                    "kind": "exit",
                    "accuracy": r.accuracy,
                    "per_exit_accuracy": r.per_exit_accuracy,
                    "distinct_exits": used.len(),
                    "final_loss": r.final_loss,
                });
                (AnyModel::Exit(m), report)
            }
            ModelChoice::Scripted => {
                let s = &a.scripted;
                let m = ScriptedAdnn::new(ScriptedConfig {
                    input_dim: INPUT_DIM,
                    thresholds: s.thresholds.clone(),
                    base_flops: s.base_flops,
                    block_flops: s.block_flops,
                })
                .map_err(|e| CliError::Schema(e.to_string()))?;
                (AnyModel::Scripted(m), json!({ "kind": "scripted", "blocks": s.thresholds.len() }))
            }
            ModelChoice::ScriptedGates => {
                check(a.skip.input_dim)?;
                let s = &a.scripted;
                let arch = SkipConfig { blocks: s.thresholds.len(), classes: self.cfg.dataset.classes, ..a.skip.clone() };
                let m = ConditionalSkipNet::scripted_gates(arch, &s.thresholds, s.sharpness, init)
                    .map_err(|e| CliError::Schema(e.to_string()))?;
                (AnyModel::Skip(m), json!({ "kind": "scripted_gates", "blocks": s.thresholds.len() }))
            }
        })
    }

    fn measure_one(&self, model: &AnyModel, x: &Tensor) -> Result<f64, CliError> {
        Ok(measure_energy(model, &self.cfg.energy, x, &self.cfg.measurement)?.mean)
    }

    fn measure_probes(&self, model: &AnyModel, ds: &LabeledDataset) -> Result<Measurements, CliError> {
        let probes = dataset::probe_inputs(ds, self.cfg.dataset.probes, self.seed("probes"))?;
        let rows = probes
            .par_iter()
            .enumerate()
            .map(|(index, x)| {
                let t = model.infer(x)?;
                Ok(MeasuredRow { index, energy_j: self.measure_one(model, x)?, flops: t.flops, active_steps: t.active_steps() })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Measurements { rows, inputs: rows_of(&probes) })
    }

    fn fit(&self, m: &Measurements, target: &str) -> Result<(Estimator, EstimatorReport), CliError> {
        let xs = tensors(m.inputs.clone());
        let ys: Vec<f64> = m.rows.iter().map(|r| r.energy_j).collect();
        Ok(train_estimator(&xs, &ys, target, &self.cfg.estimator)?)
    }

    /// The `n` dataset inputs with the fewest FLOPs, ties by index.
    fn seeds(&self, model: &dyn Adnn, ds: &LabeledDataset, n: usize) -> Result<Vec<(usize, Tensor)>, CliError> {
        let mut flops = ds.inputs.iter().enumerate().map(|(i, x)| Ok((model.infer(x)?.flops, i))).collect::<Result<Vec<_>, CliError>>()?;
        flops.sort_unstable();
        Ok(flops.into_iter().take(n).map(|(_, i)| (i, ds.inputs[i].clone())).collect())
    }

    fn input_based(&self, model: &AnyModel, est: &Estimator, seeds: &[(usize, Tensor)]) -> Result<Vec<(TestRow, Tensor)>, CliError> {
        let base = TestGenConfig { mode: Mode::InputBased, ..self.cfg.testgen.clone() };
        seeds
            .par_iter()
            .enumerate()
            .map(|(k, (index, x))| {
                let cfg = TestGenConfig { seed: rng::derive_indexed(base.seed, k as u64), ..base.clone() };
                let g = testgen::generate(Some(x), &cfg, est)?;
                let f = g.input;
                let (to, tf) = (model.infer(x)?, model.infer(&f)?);
                let (eo, ef) = (self.measure_one(model, x)?, self.measure_one(model, &f)?);
                let row = TestRow {
                    seed_index: *index,
                    orig_energy_j: eo,
                    test_energy_j: ef,
                    energy_increase_percent: metrics::energy_increase_percent(eo, ef)?,
                    flops_orig: to.flops,
                    flops_test: tf.flops,
                    inc_rf: metrics::inc_rf(to.flops as f64, tf.flops as f64, model.max_flops() as f64).ok(),
                    psnr_db: metrics::psnr(x, &f, 1.0)?,
                    ssim: metrics::ssim(x, &f)?,
                    sq_diff: metrics::mse(x, &f)?,
                    iterations: g.iterations,
                    final_loss: g.loss,
                };
                Ok((row, f))
            })
            .collect()
    }

    fn universal(&self, model: &AnyModel, est: &Estimator) -> Result<UniversalResult, CliError> {
        let cfg = TestGenConfig { mode: Mode::Universal, ..self.cfg.testgen.clone() };
        let g = testgen::generate(None, &cfg, est)?;
        let t = model.infer(&g.input)?;
        let max = self.cfg.energy.step_value(model.steps());
        Ok(UniversalResult {
            energy_j: self.measure_one(model, &g.input)?,
            flops: t.flops,
            max_noiseless_energy_j: max,
            loss: g.loss,
            restart_losses: g.restart_losses,
            input: g.input.data().to_vec(),
        })
    }

    fn summarize(&self, rows: &[TestRow], pairs: &[(Tensor, Tensor)]) -> Result<TestSummary, CliError> {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&TestRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let incs: Vec<f64> = rows.iter().filter_map(|r| r.inc_rf).collect();
        Ok(TestSummary {
            seeds: rows.len(),
            mean_energy_increase_percent: mean(&|r| r.energy_increase_percent),
            increased_fraction: rows.iter().filter(|r| r.flops_test > r.flops_orig && r.test_energy_j > r.orig_energy_j).count() as f64 / n,
            mean_inc_rf: if incs.is_empty() { None } else { Some(incs.iter().sum::<f64>() / incs.len() as f64) },
            avg_squared_difference: metrics::avg_squared_difference(pairs)?,
            mean_psnr_db: mean(&|r| r.psnr_db),
            mean_ssim: mean(&|r| r.ssim),
        })
    }

    fn white_box<'a>(&self, model: &'a AnyModel) -> Result<WhiteBox<'a>, CliError> {
        match model {
            AnyModel::Skip(m) => Ok(WhiteBox::Skip(m)),
            AnyModel::Exit(m) => Ok(WhiteBox::Exit(m)),
            AnyModel::Scripted(_) => Err(CliError::Incompatible("this stage needs a differentiable model, got a scripted one".into())),
        }
    }

    fn write_model(&self, name: &str, stage: &str, model: &AnyModel) -> Result<PathBuf, CliError> {
        self.sink.write_json(name, stage, model)
    }

    fn train_adnn(&self) -> Result<Outcome, CliError> {
        let ds = self.dataset()?;
        let (model, report) = self.build_model(&ds)?;
        let report = with(report, json!({ "steps": model.steps(), "min_flops": model.min_flops(), "max_flops": model.max_flops() }));
        let artifacts = vec![
            self.sink.write_json(DATASET, "train-adnn", &DatasetArtifact::from_dataset(&ds))?,
            self.write_model(MODEL, "train-adnn", &model)?,
            self.sink.write_json("adnn_report.json", "train-adnn", &report)?,
            self.sink.write_csv("adnn_report.csv", std::slice::from_ref(&report))?,
        ];
        let acc = report.get("accuracy").and_then(Value::as_f64).map_or(String::new(), |a| format!(" accuracy={a:.3}"));
        Ok(Outcome { summary: format!("{} model, {} steps{acc}", report["kind"].as_str().unwrap_or("?"), model.steps()), artifacts })
    }

    fn measure(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let model = self.load_model(&self.sink.path(MODEL), Some(&ds))?;
        let m = self.measure_probes(&model, &ds)?;
        let mean = m.rows.iter().map(|r| r.energy_j).sum::<f64>() / m.rows.len() as f64;
        let artifacts = vec![self.sink.write_json(MEASUREMENTS, "measure", &m)?, self.sink.write_csv("measurements.csv", &m.rows)?];
        Ok(Outcome { summary: format!("{} probes, mean F(x)={mean:.4} J", m.rows.len()), artifacts })
    }

    fn train_estimator(&self) -> Result<Outcome, CliError> {
        let m: Measurements = artifacts::read(&self.sink.path(MEASUREMENTS))?;
        let (est, report) = self.fit(&m, MODEL)?;
        let artifacts = vec![
            self.sink.write_json(ESTIMATOR, "train-estimator", &est)?,
            self.sink.write_json("estimator_report.json", "train-estimator", &report)?,
            self.sink.write_csv("estimator_report.csv", std::slice::from_ref(&report))?,
        ];
        Ok(Outcome {
            summary: format!("validation RMSE {:.4} J, relative {}", report.validation_rmse, opt(report.relative_rmse)),
            artifacts,
        })
    }

    fn generate(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let model = self.load_model(&self.sink.path(MODEL), Some(&ds))?;
        let est = self.load_estimator(&model)?;
        match self.mode {
            Mode::InputBased => {
                let seeds = self.seeds(&model, &ds, self.cfg.dataset.seeds)?;
                let (data, summary) = self.input_based_artifact(&model, &est, &seeds)?;
                let artifacts = vec![
                    self.sink.write_json("generate_input_based.json", "generate", &data)?,
                    self.sink.write_csv("generate_input_based.csv", &data.rows)?,
                ];
                Ok(Outcome { summary, artifacts })
            }
            Mode::Universal => {
                let u = self.universal(&model, &est)?;
                let row =
                    json!({ "energy_j": u.energy_j, "flops": u.flops, "max_noiseless_energy_j": u.max_noiseless_energy_j, "loss": u.loss });
                let artifacts = vec![
                    self.sink.write_json("generate_universal.json", "generate", &u)?,
                    self.sink.write_csv("generate_universal.csv", &[row])?,
                ];
                Ok(Outcome {
                    summary: format!("universal input F(f)={:.4} J of max {:.4} J", u.energy_j, u.max_noiseless_energy_j),
                    artifacts,
                })
            }
        }
    }

    fn input_based_artifact(
        &self,
        model: &AnyModel,
        est: &Estimator,
        seeds: &[(usize, Tensor)],
    ) -> Result<(InputBasedArtifact, String), CliError> {
        let results = self.input_based(model, est, seeds)?;
        let pairs: Vec<(Tensor, Tensor)> = seeds.iter().zip(&results).map(|((_, x), (_, f))| (x.clone(), f.clone())).collect();
        let rows: Vec<TestRow> = results.iter().map(|(r, _)| r.clone()).collect();
        let summary = self.summarize(&rows, &pairs)?;
        let line = format!(
            "{} seeds, mean energy increase {:.2}%, {:.0}% increased",
            summary.seeds,
            summary.mean_energy_increase_percent,
            summary.increased_fraction * 100.0
        );
        let inputs = results.into_iter().map(|(_, f)| f.data().to_vec()).collect();
        Ok((InputBasedArtifact { summary, rows, inputs }, line))
    }

    fn ilfo(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let model = self.load_model(&self.sink.path(MODEL), Some(&ds))?;
        let wb = self.white_box(&model)?;
        let seeds = self.seeds(&model, &ds, self.cfg.dataset.seeds)?;
        let rows = seeds
            .par_iter()
            .map(|(index, x)| {
                let r = ilfo_attack(wb, x, &self.cfg.ilfo)?;
                let (to, tf) = (model.infer(x)?, model.infer(&r.input)?);
                Ok(IlfoRow {
                    seed_index: *index,
                    flops_orig: to.flops,
                    flops_test: tf.flops,
                    active_orig: to.active_steps(),
                    active_test: tf.active_steps(),
                    reached_max: tf.flops == model.max_flops(),
                    best_loss: r.best_loss,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let reached = rows.iter().filter(|r| r.reached_max).count();
        let artifacts = vec![self.sink.write_json("ilfo.json", "ilfo", &rows)?, self.sink.write_csv("ilfo.csv", &rows)?];
        Ok(Outcome { summary: format!("{} seeds, {reached} reached maximum FLOPs", rows.len()), artifacts })
    }

    fn surrogate(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let target = self.load_model(&self.sink.path(MODEL), Some(&ds))?;
        let s = &self.cfg.surrogate;
        let n = s.train_inputs.min(ds.len());
        let seeds: Vec<Tensor> = self.seeds(&target, &ds, s.seeds)?.into_iter().map(|(_, x)| x).collect();
        let sur = testgen::train_surrogate(&target, &ds.inputs[..n], &s.arch, &s.train, self.seed("surrogate-init"))?;
        let sur = AnyModel::Skip(sur);
        let (records, metrics) = self.replay(&sur, &target, &seeds)?;
        let data = json!({ "metrics": metrics, "records": records });
        let artifacts = vec![
            self.write_model("surrogate_model.json", "surrogate", &sur)?,
            self.sink.write_json("surrogate.json", "surrogate", &data)?,
            self.sink.write_csv("surrogate.csv", &records)?,
        ];
        Ok(Outcome { summary: transfer_line(&metrics), artifacts })
    }

    /// ILFO on `base` from every seed, replayed on `target`.
    fn replay(
        &self,
        base: &AnyModel,
        target: &AnyModel,
        seeds: &[Tensor],
    ) -> Result<(Vec<TransferRecord>, Option<TransferMetrics>), CliError> {
        let wb = self.white_box(base)?;
        let records = seeds
            .par_iter()
            .map(|x| {
                let f = ilfo_attack(wb, x, &self.cfg.ilfo)?.input;
                Ok(TransferRecord {
                    base_orig: base.infer(x)?.flops,
                    base_test: base.infer(&f)?.flops,
                    base_max: base.max_flops(),
                    target_orig: target.infer(x)?.flops,
                    target_test: target.infer(&f)?.flops,
                    target_max: target.max_flops(),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        // Undefined when no test raised base FLOPs.
        let metrics = metrics::transfer_metrics(&records).ok();
        Ok((records, metrics))
    }

    fn transfer(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let default = self.sink.path(MODEL);
        let base_path = self.cfg.transfer.base.clone().unwrap_or_else(|| default.clone());
        let target_path = self.cfg.transfer.target.clone().unwrap_or(default);
        let base = self.load_model(&base_path, Some(&ds))?;
        let target = self.load_model(&target_path, Some(&ds))?;
        let seeds: Vec<Tensor> = self.seeds(&base, &ds, self.cfg.transfer.seeds)?.into_iter().map(|(_, x)| x).collect();
        let (records, metrics) = self.replay(&base, &target, &seeds)?;
        let data = json!({
            "base": base_path.display().to_string(),
            "target": target_path.display().to_string(),
            "metrics": metrics,
            "records": records,
        });
        let artifacts = vec![self.sink.write_json("transfer.json", "transfer", &data)?, self.sink.write_csv("transfer.csv", &records)?];
        Ok(Outcome { summary: transfer_line(&metrics), artifacts })
    }

    fn evaluate(&self) -> Result<Outcome, CliError> {
        let ds = self.dataset()?;
        let (model, _) = self.build_model(&ds)?;
        let m = self.measure_probes(&model, &ds)?;
        let (est, est_report) = self.fit(&m, MODEL)?;
        let seeds = self.seeds(&model, &ds, self.cfg.dataset.seeds)?;
        let (tests, line) = self.input_based_artifact(&model, &est, &seeds)?;
        let u = self.universal(&model, &est)?;
        let pairs: Vec<(Tensor, Tensor)> =
            seeds.iter().zip(&tests.inputs).map(|((_, x), f)| (x.clone(), Tensor::vector(f.clone()))).collect();
        let scores =
            metrics::robustness_scores(&model, &self.cfg.energy, self.cfg.robustness.budget, &pairs, &[Tensor::vector(u.input.clone())])?;
        let data = EvaluateArtifact {
            estimator: est_report,
            summary: tests.summary.clone(),
            universal: u,
            robustness: scores,
            rows: tests.rows.clone(),
        };
        let artifacts = vec![
            self.sink.write_json(DATASET, "evaluate", &DatasetArtifact::from_dataset(&ds))?,
            self.write_model(MODEL, "evaluate", &model)?,
            self.sink.write_json(MEASUREMENTS, "evaluate", &m)?,
            self.sink.write_json(ESTIMATOR, "evaluate", &est)?,
            self.sink.write_json("evaluate.json", "evaluate", &data)?,
            self.sink.write_csv("evaluate.csv", &data.rows)?,
        ];
        Ok(Outcome { summary: format!("{line}; universal F(f)={:.4} J", data.universal.energy_j), artifacts })
    }

    fn robustness(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let model = self.load_model(&self.sink.path(MODEL), Some(&ds))?;
        let est = self.load_estimator(&model)?;
        let seeds = self.seeds(&model, &ds, self.cfg.robustness.seeds)?;
        let specs: Vec<CorruptionSpec> = if self.cfg.corruptions.is_empty() {
            CorruptionKind::ALL
                .iter()
                .enumerate()
                .map(|(i, &kind)| CorruptionSpec { kind, severity: 3, seed: rng::derive_indexed(self.seed("corruptions"), i as u64) })
                .collect()
        } else {
            self.cfg.corruptions.clone()
        };
        let mut rows = Vec::with_capacity(specs.len());
        for spec in &specs {
            let per = seeds
                .par_iter()
                .map(|(i, x)| {
                    let f = corrupt(x, &CorruptionSpec { seed: rng::derive_indexed(spec.seed, *i as u64), ..*spec })?;
                    let (eo, ef) = (self.measure_one(&model, x)?, self.measure_one(&model, &f)?);
                    let up = model.infer(&f)?.flops > model.infer(x)?.flops;
                    Ok((metrics::energy_increase_percent(eo, ef)?, up, metrics::psnr(x, &f, 1.0)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let n = per.len() as f64;
            rows.push(CorruptionRow {
                kind: spec.kind.name().to_string(),
                severity: spec.severity,
                mean_energy_increase_percent: per.iter().map(|p| p.0).sum::<f64>() / n,
                flops_increased_fraction: per.iter().filter(|p| p.1).count() as f64 / n,
                mean_psnr_db: per.iter().map(|p| p.2).sum::<f64>() / n,
            });
        }
        let tests = self.input_based(&model, &est, &seeds)?;
        let pairs: Vec<(Tensor, Tensor)> = seeds.iter().zip(&tests).map(|((_, x), (_, f))| (x.clone(), f.clone())).collect();
        let u = self.universal(&model, &est)?;
        let scores =
            metrics::robustness_scores(&model, &self.cfg.energy, self.cfg.robustness.budget, &pairs, &[Tensor::vector(u.input.clone())])?;
        let generated = [
            ("input_based", tests.iter().map(|(r, _)| r.energy_increase_percent).sum::<f64>() / tests.len() as f64),
            ("universal", metrics::energy_increase_percent(self.cfg.energy.step_value(0), u.energy_j)?),
        ];
        let best_corruption = rows.iter().map(|r| r.mean_energy_increase_percent).fold(f64::NEG_INFINITY, f64::max);
        let data = json!({
            "corruptions": rows,
            "generated_mean_increase_percent": { "input_based": generated[0].1, "universal_vs_idle": generated[1].1 },
            "scores": scores,
        });
        let artifacts = vec![self.sink.write_json("robustness.json", "robustness", &data)?, self.sink.write_csv("robustness.csv", &rows)?];
        Ok(Outcome {
            summary: format!(
                "best corruption {best_corruption:.2}% vs input-based {:.2}%; E_i={:.3} E_u={:.3}",
                generated[0].1, scores.e_i, scores.e_u
            ),
            artifacts,
        })
    }

    fn defend(&self) -> Result<Outcome, CliError> {
        let ds = self.load_dataset()?;
        let model = self.load_model(&self.sink.path(MODEL), Some(&ds))?;
        let wb = self.white_box(&model)?;
        let est = self.load_estimator(&model)?;
        let d = &self.cfg.defense;

        let noisy_base = TestGenConfig { mode: Mode::Universal, restarts: d.noisy_restarts.max(1), ..self.cfg.testgen.clone() };
        let noisy = (0..d.noisy_inputs)
            .into_par_iter()
            .map(|i| {
                let cfg = TestGenConfig { seed: rng::derive_indexed(self.seed("defense-noisy"), i as u64), ..noisy_base.clone() };
                Ok(testgen::generate(None, &cfg, &est)?.input)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let normal_n = d.noisy_inputs.min(ds.len());
        let (filter, filter_accuracy) = defense::train_filter(&ds.inputs[..normal_n], &noisy, &d.filter)?;

        let n = d.detector_inputs.min(ds.len());
        let seeds = self.seeds(&model, &ds, n)?;
        let adversarial: Vec<Tensor> = self.input_based(&model, &est, &seeds)?.into_iter().map(|(_, f)| f).collect();
        let benign_idx: Vec<usize> = (ds.len() - n..ds.len()).collect();
        let half = n / 2;
        let features = |xs: &[Tensor]| xs.par_iter().map(|x| defense::gradient_feature(wb, x)).collect::<Result<Vec<_>, _>>();
        let benign: Vec<Tensor> = benign_idx.iter().map(|&i| ds.inputs[i].clone()).collect();
        let mut train_f = features(&benign[..half])?;
        train_f.extend(features(&adversarial[..half])?);
        let labels: Vec<bool> = (0..2 * half).map(|i| i >= half).collect();
        let svm = defense::train_svm(&train_f, &labels, d.svm_lambda, d.svm_epochs, self.seed("svm"))?.svm;
        let benign_labels: Vec<usize> = benign_idx[half..].iter().map(|&i| ds.labels[i]).collect();
        let report = defense::evaluate_defense(wb, &svm, &self.cfg.energy, &benign[half..], &benign_labels, &adversarial[half..])?;
        let data = DefenseArtifact {
            report: report.clone(),
            filter_accuracy,
            filter_flops: filter.flops(),
            target_min_flops: model.min_flops(),
            detector_flops: defense::detector_flops(wb),
            detector_joules: defense::detector_joules(wb, &self.cfg.energy),
        };
        let artifacts =
            vec![self.sink.write_json("defense.json", "defend", &data)?, self.sink.write_csv("defense.csv", std::slice::from_ref(&data))?];
        Ok(Outcome {
            summary: format!(
                "filter accuracy {:.1}%, detector AUC {:.3}, adversarial energy -{:.1}%, benign energy +{:.1}%",
                filter_accuracy * 100.0,
                report.auc,
                report.adv_energy_dec_pct,
                report.benign_energy_inc_pct
            ),
            artifacts,
        })
    }

    fn correlate(&self) -> Result<Outcome, CliError> {
        let m: Measurements = artifacts::read(&self.sink.path(MEASUREMENTS))?;
        let est: Estimator = artifacts::read(&self.sink.path(ESTIMATOR))?;
        let xs = tensors(m.inputs.clone());
        let pred = est.predict_batch(&xs)?;
        let measured: Vec<f64> = m.rows.iter().map(|r| r.energy_j).collect();
        let perms = self.cfg.correlate.permutations;
        let mut rows = vec![correlation_row("estimate_vs_measured", &pred, &measured, perms, self.seed("correlate-estimator"))];

        let tests = self.sink.path("generate_input_based.json");
        let ilfo = self.sink.path("ilfo.json");
        if tests.is_file() && ilfo.is_file() {
            let t: InputBasedArtifact = artifacts::read(&tests)?;
            let i: Vec<IlfoRow> = artifacts::read(&ilfo)?;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for r in &t.rows {
                if let Some(o) = i.iter().find(|o| o.seed_index == r.seed_index) {
                    a.push(r.flops_test as f64 - r.flops_orig as f64);
                    b.push(o.flops_test as f64 - o.flops_orig as f64);
                }
            }
            rows.push(correlation_row("input_based_vs_ilfo_flops_gain", &a, &b, perms, self.seed("correlate-cross")));
        }
        let artifacts = vec![self.sink.write_json("correlate.json", "correlate", &rows)?, self.sink.write_csv("correlate.csv", &rows)?];
        let first = &rows[0];
        Ok(Outcome { summary: format!("estimate vs measured r={} p={}", opt(first.r), opt(first.p)), artifacts })
    }

    fn report(&self) -> Result<Outcome, CliError> {
        let mut rows = Vec::new();
        for name in KNOWN {
            let p = self.sink.path(name);
            if !p.is_file() {
                continue;
            }
            let stamped = artifacts::stamped_hash(&p)?;
            rows.push(ReportRow {
                artifact: name.to_string(),
                config_hash: stamped.clone().unwrap_or_default(),
                stale: stamped.as_deref() != Some(self.sink.config_hash.as_str()),
            });
        }
        if rows.is_empty() {
            return Err(CliError::MissingFile(self.sink.dir.clone()));
        }
        let stale = rows.iter().filter(|r| r.stale).count();
        let summary = json!({
            "artifacts": rows,
            "evaluate": read_summary(&self.sink.path("evaluate.json"), "summary"),
            "defense": read_summary(&self.sink.path("defense.json"), ""),
            "transfer": read_summary(&self.sink.path("transfer.json"), "metrics"),
        });
        let artifacts = vec![self.sink.write_json("report.json", "report", &summary)?, self.sink.write_csv("report.csv", &rows)?];
        Ok(Outcome { summary: format!("{} artifacts, {stale} stale", rows.len()), artifacts })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InputBasedArtifact {
    summary: TestSummary,
    rows: Vec<TestRow>,
    inputs: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct EvaluateArtifact {
    estimator: EstimatorReport,
    summary: TestSummary,
    universal: UniversalResult,
    robustness: RobustnessScores,
    rows: Vec<TestRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IlfoRow {
    seed_index: usize,
    flops_orig: u64,
    flops_test: u64,
    active_orig: usize,
    active_test: usize,
    reached_max: bool,
    best_loss: f64,
}

#[derive(Serialize)]
struct CorruptionRow {
    kind: String,
    severity: u8,
    mean_energy_increase_percent: f64,
    flops_increased_fraction: f64,
    mean_psnr_db: f64,
}

#[derive(Clone, Serialize)]
struct DefenseArtifact {
    #[serde(flatten)]
    report: DefenseReport,
    filter_accuracy: f64,
    filter_flops: u64,
    target_min_flops: u64,
    detector_flops: u64,
    detector_joules: f64,
}

#[derive(Serialize)]
struct CorrelationRow {
    pair: String,
    n: usize,
    r: Option<f64>,
    p: Option<f64>,
    note: Option<String>,
}

fn correlation_row(pair: &str, a: &[f64], b: &[f64], perms: usize, seed: u64) -> CorrelationRow {
    match metrics::pearson(a, b, perms, seed) {
        Ok(c) => CorrelationRow { pair: pair.into(), n: a.len(), r: Some(c.r), p: Some(c.p), note: None },
        Err(e) => CorrelationRow { pair: pair.into(), n: a.len(), r: None, p: None, note: Some(e.to_string()) },
    }
}

#[derive(Serialize)]
struct ReportRow {
    artifact: String,
    config_hash: String,
    stale: bool,
}

fn read_summary(path: &Path, key: &str) -> Value {
    match artifacts::read::<Value>(path) {
        Ok(v) if key.is_empty() => v,
        Ok(v) => v.get(key).cloned().unwrap_or(Value::Null),
        Err(_) => Value::Null,
    }
}

fn with(mut a: Value, b: Value) -> Value {
    if let (Value::Object(a), Value::Object(b)) = (&mut a, b) {
        a.extend(b);
    }
    a
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn transfer_line(m: &Option<TransferMetrics>) -> String {
    match m {
        Some(m) => format!("ITP={:.1} ETP={:.1} ({} base-effective)", m.itp, m.etp, m.base_effective),
        None => "ITP=n/a ETP=n/a (no test raised base FLOPs)".into(),
    }
}
