//! Seeded synthetic 8×8 classification data with graded difficulty.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SIDE: usize = 8;
pub const INPUT_DIM: usize = SIDE * SIDE;

const HIGH: f64 = 0.9;
const LOW: f64 = 0.1;
const FADE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub difficulty: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    difficulty: Vec<f64>,
}

/// Class `k`'s pattern: the 2×2 tiles whose index is `k` modulo the class
/// count are bright, everything else dark. Supports are disjoint, so
/// centered prototypes are mutually orthogonal.
pub fn prototype(class: usize, num_classes: usize) -> Tensor {
    let data = (0..INPUT_DIM)
        .map(|i| {
            let (r, c) = (i / SIDE, i % SIDE);
            let tile = (r / 2) * (SIDE / 2) + c / 2;
            if tile % num_classes == class {
                HIGH
            } else {
                LOW
            }
        })
        .collect();
    Tensor::new(vec![INPUT_DIM], data).expect("sized")
}

/// `num_examples` noisy prototypes. Example `i` draws a difficulty
/// `a ~ U[0,1]`, fades the prototype's contrast by `1 − FADE·a` around
/// mid-grey and adds per-pixel uniform noise in `±a·noise_span`.
pub fn generate(num_examples: usize, num_classes: usize, noise_span: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(0.0..=1.0).contains(&noise_span) {
        return Err(Error::InvalidArgument(format!("noise_span must be in [0,1], got {noise_span}")));
    }
    let protos: Vec<Tensor> = (0..num_classes).map(|k| prototype(k, num_classes)).collect();
    let mut r = rng::stream(seed);
    let mut ds = LabeledDataset { inputs: vec![], labels: vec![], difficulty: vec![] };
    for _ in 0..num_examples {
        let label = r.random_range(0..num_classes);
        let a: f64 = r.random();
        let amp = a * noise_span;
        let contrast = 1.0 - FADE * a;
        let data = protos[label]
            .data()
            .iter()
            .map(|&v| {
                let noise = if amp > 0.0 { r.random_range(-amp..=amp) } else { 0.0 };
                (0.5 + contrast * (v - 0.5) + noise).clamp(0.0, 1.0)
            })
            .collect();
        let x = Tensor::new(vec![INPUT_DIM], data)?;
        ds.inputs.push(x);
        ds.labels.push(label);
        ds.difficulty.push(a);
    }
    Ok(ds)
}

/// Inputs spanning the whole brightness range, for energy profiling.
///
/// Half are dataset images re-centered on a random level in `[0,1]`, half
/// are uniform noise around a random level with a random spread.
pub fn probe_inputs(base: &LabeledDataset, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    if base.is_empty() {
        return Err(Error::Empty("probe base dataset"));
    }
    let mut r = rng::stream(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let level: f64 = r.random();
        let x = if i % 2 == 0 {
            let src = &base.inputs[r.random_range(0..base.len())];
            let m = src.mean();
            src.map(|v| (v - m + level).clamp(0.0, 1.0))
        } else {
            let spread: f64 = r.random_range(0.0..0.5);
            let data = (0..INPUT_DIM).map(|_| (level + spread * r.random_range(-1.0..=1.0)).clamp(0.0, 1.0)).collect();
            Tensor::new(vec![INPUT_DIM], data).expect("sized")
        };
        out.push(x);
    }
    Ok(out)
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| LabeledDataset {
            inputs: self.inputs[r.clone()].to_vec(),
            labels: self.labels[r.clone()].to_vec(),
            difficulty: self.difficulty[r].to_vec(),
        };
        (part(0..n), part(n..self.len()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            inputs: self.inputs.iter().map(|t| t.data().to_vec()).collect(),
            labels: self.labels.clone(),
            difficulty: self.difficulty.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        if file.inputs.len() != file.labels.len() || file.inputs.len() != file.difficulty.len() {
            return Err(Error::InvalidArgument("inputs, labels and difficulty differ in length".into()));
        }
        let inputs = file
            .inputs
            .into_iter()
            .map(|row| {
                if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidArgument("pixel outside [0,1]".into()));
                }
                let n = row.len();
                Tensor::new(vec![n], row)
            })
            .collect::<Result<_>>()?;
        Ok(Self { inputs, labels: file.labels, difficulty: file.difficulty })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
