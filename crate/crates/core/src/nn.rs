//! Dense-layer plumbing shared by every model.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named parameter tensors of one model.
pub type Params = BTreeMap<String, Tensor>;

/// Adds `{name}.w` (Xavier-uniform) and `{name}.b` (zeros) to `params`.
pub fn init_dense(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Records `x · {name}.w + {name}.b`.
pub fn dense(g: &mut Graph, params: &Params, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(&format!("{name}.w"), &params[&format!("{name}.w")])?;
    let b = g.param(&format!("{name}.b"), &params[&format!("{name}.b")])?;
    g.dense(x, w, b)
}

/// Multiply-add count of a dense map, two per weight.
pub fn dense_flops(fan_in: usize, fan_out: usize) -> u64 {
    2 * fan_in as u64 * fan_out as u64
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("sized")
}

/// Seeded permutation of `0..n` used for minibatch order.
pub fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Rows `idx` of a list of equally sized inputs as one `[idx.len(), dim]` matrix.
pub fn batch(inputs: &[Tensor], idx: &[usize]) -> Tensor {
    let dim = inputs[idx[0]].len();
    let data = idx.iter().flat_map(|&i| inputs[i].data().iter().copied()).collect();
    Tensor::new(vec![idx.len(), dim], data).expect("equal input sizes")
}
