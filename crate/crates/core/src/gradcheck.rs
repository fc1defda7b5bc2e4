//! Central finite-difference checks for [`Graph`] gradients, and a generator
//! of random graphs over the full operator set.
//!
//! Finite differences only use [`Graph::evaluate`], never the reverse sweep.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Axis, Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central differences of `output` with respect to the input or parameter `name`.
pub fn finite_difference(graph: &Graph, output: NodeId, name: &str, h: f64) -> Result<Tensor> {
    let base = graph.value(graph.leaf_id(name).ok_or_else(|| crate::Error::UnknownBinding(name.into()))?);
    let mut grad = Tensor::zeros(base.shape());
    let mut bindings = BTreeMap::new();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        bindings.insert(name.to_string(), plus);
        let fp = graph.evaluate(&bindings)?.value(output).item()?;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        bindings.insert(name.to_string(), minus);
        let fm = graph.evaluate(&bindings)?.value(output).item()?;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; absolute difference when both norms are below 1e-8.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.l2_norm().max(b.l2_norm());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error between the reverse-mode gradient and its finite-difference
/// estimate, with every parameter's gradient concatenated into one vector.
pub fn gradient_relative_error(graph: &Graph, output: NodeId, h: f64) -> Result<f64> {
    let grads = graph.backward(output)?.params();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, g) in &grads {
        analytic.extend_from_slice(g.data());
        numeric.extend(finite_difference(graph, output, name, h)?.into_data());
    }
    if analytic.is_empty() {
        return Ok(0.0);
    }
    Ok(relative_error(&Tensor::vector(analytic), &Tensor::vector(numeric)))
}

fn normal_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn near_kink(t: &Tensor, kink: f64) -> bool {
    t.data().iter().any(|v| (v - kink).abs() < 1e-3)
}

/// A random differentiable graph ending in a scalar, plus that scalar's node.
///
/// Kinked operators (`relu`, `max_const`) are only applied when no input
/// element sits within 1e-3 of the kink. Graphs whose gradient is tiny
/// relative to the output (saturated `tanh`/`sigmoid` chains) are redrawn,
/// as are draws that underflow a `log`: central differences cannot resolve
/// either at `h = 1e-6` in `f64`.
pub fn random_graph(rng: &mut Rng) -> Result<(Graph, NodeId)> {
    loop {
        let Ok((g, out)) = draw_graph(rng) else { continue };
        let f = g.value(out).item()?.abs();
        let grad_norm = g.backward(out)?.params().values().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt();
        if grad_norm >= 1e-2 * f.max(1.0) {
            return Ok((g, out));
        }
    }
}

fn draw_graph(rng: &mut Rng) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let rows: usize = rng.random_range(1..=3);
    let mut width: usize = rng.random_range(2..=4);
    let mut fresh = 0usize;
    let mut new_param = |g: &mut Graph, shape: &[usize], rng: &mut Rng| -> Result<NodeId> {
        fresh += 1;
        g.param(&format!("p{fresh}"), &normal_tensor(shape, 1.0, rng))
    };
    let mut pool = vec![new_param(&mut g, &[rows, width], rng)?];
    let steps = rng.random_range(4..=10);
    for _ in 0..steps {
        let a = pool[rng.random_range(0..pool.len())];
        let next = match rng.random_range(0..12) {
            0 if !near_kink(g.value(a), 0.0) => g.relu(a)?,
            1 => g.sigmoid(a)?,
            2 => g.tanh(a)?,
            3 => g.softmax(a)?,
            4 => {
                let c: f64 = rng.random_range(-1.0..1.0);
                if near_kink(g.value(a), c) {
                    g.tanh(a)?
                } else {
                    g.max_const(a, c)?
                }
            }
            5 => {
                let s = g.sigmoid(a)?;
                g.log(s)?
            }
            6 => {
                let b = pool[rng.random_range(0..pool.len())];
                g.add(a, b)?
            }
            7 => {
                let b = pool[rng.random_range(0..pool.len())];
                g.sub(a, b)?
            }
            8 => {
                let b = pool[rng.random_range(0..pool.len())];
                g.mul(a, b)?
            }
            9 => {
                let shape = if rng.random_bool(0.5) { vec![width] } else { vec![rows, 1] };
                let b = new_param(&mut g, &shape, rng)?;
                g.mul(a, b)?
            }
            10 => {
                let out: usize = rng.random_range(2..=4);
                let w = new_param(&mut g, &[width, out], rng)?;
                let b = new_param(&mut g, &[out], rng)?;
                let d = g.dense(a, w, b)?;
                width = out;
                pool.clear();
                d
            }
            _ => g.square(a)?,
        };
        if g.value(next).shape() == [rows, width] {
            pool.push(next);
        }
    }
    let last = *pool.last().expect("pool non-empty");
    let out = match rng.random_range(0..5) {
        0 => g.sum(last, Axis::All)?,
        1 => g.mean(last, Axis::All)?,
        2 => g.l2_norm(last)?,
        3 => {
            let s = g.sum(last, Axis::Last)?;
            let sq = g.square(s)?;
            g.sum(sq, Axis::All)?
        }
        _ => {
            let h = g.softmax_entropy(last)?;
            g.mean(h, Axis::All)?
        }
    };
    Ok((g, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn squared_norm_of_matrix_vector_product() {
        let mut r = rng::stream(11);
        let mut g = Graph::new();
        let w = g.param("w", &normal_tensor(&[3, 3], 1.0, &mut r)).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        let x = g.input("x", normal_tensor(&[3], 1.0, &mut r)).unwrap();
        let wx = g.dense(x, w, b).unwrap();
        let n = g.l2_norm(wx).unwrap();
        let f = g.square(n).unwrap();
        assert!(gradient_relative_error(&g, f, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn random_graphs_produce_scalars() {
        let mut r = rng::stream(3);
        for _ in 0..20 {
            let (g, out) = random_graph(&mut r).unwrap();
            assert_eq!(g.value(out).len(), 1);
        }
    }
}
