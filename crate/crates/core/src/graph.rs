//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation is evaluated as soon as it is added to a [`Graph`] and
//! recorded on its tape, so node values are always available. The recorded
//! tape can be replayed with new leaf bindings through [`Graph::evaluate`],
//! and [`Graph::backward`] sweeps it in reverse to produce exact gradients.
//!
//! The operator set is deliberately closed: dense affine maps, `relu`,
//! `sigmoid`, `tanh`, `softmax` (last axis), broadcasting `add`/`sub`/`mul`,
//! `sum`/`mean` (over everything or the last axis), max against a constant,
//! the L2 norm, and `log`. Everything else is composed from these.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Last,
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Constant,
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId, Axis),
    Mean(NodeId, Axis),
    MaxConst(NodeId, f64),
    L2Norm(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaxConst(..) => "max_const",
            Op::L2Norm(_) => "l2_norm",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) | Op::Constant => vec![],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::MaxConst(a, _)
            | Op::L2Norm(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded computation. Nodes are stored in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Node values produced by replaying a graph.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    outputs: BTreeMap<String, NodeId>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| &self.values[id.0])
    }

    /// All named outputs.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs.iter().map(|(k, id)| (k.clone(), self.values[id.0].clone())).collect()
    }
}

/// Adjoints from one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient with respect to a node; zeros when the output does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.adjoints[id.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&id| self.wrt(id))
    }

    /// One gradient per parameter leaf, keyed by parameter name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, &id)| (k.clone(), self.wrt(id))).collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Named input or parameter.
    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).or_else(|| self.params.get(name)).copied()
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id.0, op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// A named free input; may be rebound in [`Graph::evaluate`].
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if let Some(&id) = self.inputs.get(name) {
            return Ok(id);
        }
        let id = self.push_leaf(Op::Input(name.to_string()), value)?;
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// A named parameter. Adding the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let id = self.push_leaf(Op::Param(name.to_string()), value.clone())?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(Op::Constant, value)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let operands: Vec<&Tensor> = op.operands().iter().map(|o| &self.nodes[o.0].value).collect();
        let value = forward(id, &op, &operands)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(id))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`, `b` is `[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.push(Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.push(Op::Mean(a, axis))
    }

    /// Elementwise `max(a, c)`; the subgradient at the kink is 0.
    pub fn max_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::MaxConst(a, c))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2Norm(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(k))?;
        self.mul(a, c)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    /// `k + a`, elementwise.
    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(k))?;
        self.add(a, c)
    }

    /// `a ⊙ a`.
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Shannon entropy of the softmax of `logits`, one value per row.
    pub fn softmax_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let p = self.softmax(logits)?;
        let lp = self.log(p)?;
        let plp = self.mul(p, lp)?;
        let s = self.sum(plp, Axis::Last)?;
        self.neg(s)
    }

    /// Mean cross-entropy of `logits` rows against one-hot `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let p = self.softmax(logits)?;
        let lp = self.log(p)?;
        let picked = self.mul(lp, targets)?;
        let per_row = self.sum(picked, Axis::Last)?;
        let m = self.mean(per_row, Axis::All)?;
        self.neg(m)
    }

    /// Replays the tape with `bindings` overriding named inputs and parameters.
    ///
    /// Leaves without a binding keep their recorded values.
    pub fn evaluate(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        for name in bindings.keys() {
            if !self.inputs.contains_key(name) && !self.params.contains_key(name) {
                return Err(Error::UnknownBinding(name.clone()));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(name) | Op::Param(name) => match bindings.get(name) {
                    Some(t) if !t.is_finite() => return Err(Error::NonFinite { node: i, op: node.op.name() }),
                    Some(t) => t.clone(),
                    None => node.value.clone(),
                },
                Op::Constant => node.value.clone(),
                op => {
                    let operands: Vec<&Tensor> = op.operands().iter().map(|o| &values[o.0]).collect();
                    forward(i, op, &operands)?
                }
            };
            values.push(v);
        }
        Ok(Evaluation { values, outputs: self.outputs.clone() })
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            for (target, contribution) in backward_op(&node.op, &node.value, &g, &self.nodes) {
                accumulate(&mut adj[target.0], contribution);
            }
            adj[i] = Some(g);
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let adjoints =
            adj.into_iter().zip(&shapes).map(|(a, s)| a.map(|d| Tensor::new(s.clone(), d).expect("adjoint matches node shape"))).collect();
        Ok(Gradients { adjoints, shapes, params: self.params.clone() })
    }

    /// Gradients of `output` with respect to the named parameters.
    pub fn gradient(&self, output: NodeId, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let g = self.backward(output)?;
        wrt.iter()
            .map(|&name| g.param(name).map(|t| (name.to_string(), t)).ok_or_else(|| Error::UnknownBinding(name.to_string())))
            .collect()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

fn mismatch(node: usize, op: &Op, detail: String) -> Error {
    Error::ShapeMismatch { node, op: op.name(), detail }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into an operand of `shape`.
fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    if shape == out_shape {
        return (0..total).collect();
    }
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduced_shape(shape: &[usize], axis: Axis) -> Vec<usize> {
    match axis {
        Axis::All => vec![1],
        Axis::Last if shape.len() > 1 => shape[..shape.len() - 1].to_vec(),
        Axis::Last => vec![1],
    }
}

fn forward(node: usize, op: &Op, args: &[&Tensor]) -> Result<Tensor> {
    let value = match op {
        Op::Input(_) | Op::Param(_) | Op::Constant => unreachable!("leaves are not recomputed"),
        Op::Dense { .. } => {
            let (x, w, b) = (args[0], args[1], args[2]);
            if w.shape().len() != 2 {
                return Err(mismatch(node, op, format!("weight must be rank 2, got {:?}", w.shape())));
            }
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            if x.cols() != fan_in {
                return Err(mismatch(node, op, format!("input {:?} does not match weight {:?}", x.shape(), w.shape())));
            }
            if b.shape() != [fan_out] {
                return Err(mismatch(node, op, format!("bias {:?} expected [{fan_out}]", b.shape())));
            }
            let rows = x.rows();
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            let mut out = Vec::with_capacity(rows * fan_out);
            for r in 0..rows {
                let mut acc = bd.to_vec();
                for (k, &xv) in xd[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = &wd[k * fan_out..(k + 1) * fan_out];
                    acc.iter_mut().zip(wr).for_each(|(a, &wv)| *a += xv * wv);
                }
                out.extend_from_slice(&acc);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-empty") = fan_out;
            Tensor::new(shape, out)?
        }
        Op::Relu(_) => args[0].map(|v| v.max(0.0)),
        Op::Sigmoid(_) => args[0].map(sigmoid),
        Op::Tanh(_) => args[0].map(f64::tanh),
        Op::Softmax(_) => {
            let a = args[0];
            let c = a.cols();
            let mut out = Vec::with_capacity(a.len());
            for r in 0..a.rows() {
                let row = a.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                out.extend(e.iter().map(|v| v / z));
            }
            debug_assert_eq!(out.len() % c, 0);
            Tensor::new(a.shape().to_vec(), out)?
        }
        Op::Log(_) => args[0].map(f64::ln),
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) => {
            let (a, b) = (args[0], args[1]);
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| mismatch(node, op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
            let ia = broadcast_index_map(a.shape(), &shape);
            let ib = broadcast_index_map(b.shape(), &shape);
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
            Tensor::new(shape, data)?
        }
        Op::Sum(_, axis) | Op::Mean(_, axis) => {
            let a = args[0];
            let shape = reduced_shape(a.shape(), *axis);
            let group = match axis {
                Axis::All => a.len(),
                Axis::Last => a.cols(),
            };
            let div = if matches!(op, Op::Mean(..)) { group as f64 } else { 1.0 };
            let data = a.data().chunks(group).map(|c| c.iter().sum::<f64>() / div).collect();
            Tensor::new(shape, data)?
        }
        Op::MaxConst(_, c) => args[0].map(|v| v.max(*c)),
        Op::L2Norm(_) => Tensor::scalar(args[0].l2_norm()),
    };
    if !value.is_finite() {
        return Err(Error::NonFinite { node, op: op.name() });
    }
    Ok(value)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Vector-Jacobian products of one node: `(operand, contribution)` pairs.
fn backward_op(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node]) -> Vec<(NodeId, Vec<f64>)> {
    let val = |id: NodeId| &nodes[id.0].value;
    match *op {
        Op::Input(_) | Op::Param(_) | Op::Constant => vec![],
        Op::Dense { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.rows();
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; fan_out];
            for r in 0..rows {
                let gr = &g[r * fan_out..(r + 1) * fan_out];
                let xr = &xv.data()[r * fan_in..(r + 1) * fan_in];
                db.iter_mut().zip(gr).for_each(|(d, &gv)| *d += gv);
                for k in 0..fan_in {
                    let wr = &wv.data()[k * fan_out..(k + 1) * fan_out];
                    dx[r * fan_in + k] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let xk = xr[k];
                    if xk != 0.0 {
                        dw[k * fan_out..(k + 1) * fan_out].iter_mut().zip(gr).for_each(|(d, &gv)| *d += xk * gv);
                    }
                }
            }
            vec![(x, dx), (w, dw), (b, db)]
        }
        Op::Relu(a) => {
            let d = val(a).data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
            vec![(a, d)]
        }
        Op::Sigmoid(a) => {
            let d = out.data().iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
            vec![(a, d)]
        }
        Op::Tanh(a) => {
            let d = out.data().iter().zip(g).map(|(&t, &gv)| gv * (1.0 - t * t)).collect();
            vec![(a, d)]
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut d = Vec::with_capacity(out.len());
            for (p, gr) in out.data().chunks(c).zip(g.chunks(c)) {
                let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                d.extend(p.iter().zip(gr).map(|(&pv, &gv)| pv * (gv - dot)));
            }
            vec![(a, d)]
        }
        Op::Log(a) => {
            let d = val(a).data().iter().zip(g).map(|(&v, &gv)| gv / v).collect();
            vec![(a, d)]
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let ia = broadcast_index_map(av.shape(), out.shape());
            let ib = broadcast_index_map(bv.shape(), out.shape());
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for (k, &gv) in g.iter().enumerate() {
                let (i, j) = (ia[k], ib[k]);
                match op {
                    Op::Add(..) => {
                        da[i] += gv;
                        db[j] += gv;
                    }
                    Op::Sub(..) => {
                        da[i] += gv;
                        db[j] -= gv;
                    }
                    _ => {
                        da[i] += gv * bv.data()[j];
                        db[j] += gv * av.data()[i];
                    }
                }
            }
            vec![(a, da), (b, db)]
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let av = val(a);
            let group = match axis {
                Axis::All => av.len(),
                Axis::Last => av.cols(),
            };
            let div = if matches!(op, Op::Mean(..)) { group as f64 } else { 1.0 };
            let d = (0..av.len()).map(|i| g[i / group] / div).collect();
            vec![(a, d)]
        }
        Op::MaxConst(a, c) => {
            let d = val(a).data().iter().zip(g).map(|(&v, &gv)| if v > c { gv } else { 0.0 }).collect();
            vec![(a, d)]
        }
        Op::L2Norm(a) => {
            let n = out.data()[0];
            let d = if n > 0.0 { val(a).data().iter().map(|&v| g[0] * v / n).collect() } else { vec![0.0; val(a).len()] };
            vec![(a, d)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2], &[3.0, 4.0])).unwrap();
        let w = g.param("w", &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.param("b", &t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2], &[-1.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.gradient(y, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn sum_tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &t(&[2], &[0.0, 0.0])).unwrap();
        let th = g.tanh(x).unwrap();
        let s = g.sum(th, Axis::All).unwrap();
        assert_eq!(g.backward(s).unwrap().param("x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_gradient_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let w = g.param("w", &Tensor::zeros(&[2, 2])).unwrap();
        let b = g.param("b", &Tensor::zeros(&[2])).unwrap();
        match g.dense(x, w, b) {
            Err(Error::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 3);
                assert_eq!(op, "dense");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let y = g.input("y", t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.add(x, y), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log", .. })));
    }

    #[test]
    fn broadcasting_column_times_matrix() {
        let mut g = Graph::new();
        let col = g.param("c", &t(&[2, 1], &[2.0, 3.0])).unwrap();
        let m = g.param("m", &t(&[2, 3], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0])).unwrap();
        let p = g.mul(col, m).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 2.0, 2.0, 6.0, 6.0, 6.0]);
        let s = g.sum(p, Axis::All).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("c").unwrap().data(), &[3.0, 6.0]);
        assert_eq!(grads.param("m").unwrap().data(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn max_const_kink_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.param("x", &t(&[3], &[-1.0, 0.0, 1.0])).unwrap();
        let m = g.max_const(x, 0.0).unwrap();
        let s = g.sum(m, Axis::All).unwrap();
        assert_eq!(g.backward(s).unwrap().param("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn evaluate_rebinds_leaves() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(2.0)).unwrap();
        let y = g.square(x).unwrap();
        g.mark_output("y", y);
        let mut b = BTreeMap::new();
        b.insert("x".to_string(), Tensor::scalar(5.0));
        let e = g.evaluate(&b).unwrap();
        assert_eq!(e.output("y").unwrap().data(), &[25.0]);
        b.insert("nope".to_string(), Tensor::scalar(1.0));
        assert!(matches!(g.evaluate(&b), Err(Error::UnknownBinding(_))));
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0])).unwrap();
        let p = g.softmax(x).unwrap();
        for r in 0..2 {
            let row = g.value(p).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}
