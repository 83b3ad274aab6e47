//! Small computation graphs over [`Grid2D`] with reverse-mode gradients, and
//! central-difference gradient checking.
//!
//! Graphs can be built programmatically or parsed from a line-oriented text
//! form:
//!
//! ```text
//! h = matmul x0 x1
//! p = softmax h 2.0
//! out = sum p
//! ```
//!
//! `x0`, `x1`, ... name the graph inputs. The last node is the output and must
//! be a scalar (1x1). Op names outside the supported set are rejected with a
//! capability error.

use std::collections::HashMap;

use super::backward::{
    layer_norm, layer_norm_backward, mean_normalize, mean_normalize_backward, mse_backward, silu,
    silu_backward, softmax_rows_backward,
};
use super::grid::{matmul, matmul_nt, mse, sigmoid, softmax_rows, Grid2D};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(usize),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Softmax(NodeId, f64),
    Sigmoid(NodeId),
    Silu(NodeId),
    LayerNorm(NodeId),
    Scale(NodeId, f64),
    /// Divides every entry by the mean of all entries.
    MeanNormalize(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
}

pub const SUPPORTED_OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "softmax",
    "sigmoid",
    "silu",
    "layernorm",
    "scale",
    "meannorm",
    "sum",
    "mean",
    "mse",
];

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

struct Evaluated {
    values: Vec<Grid2D>,
    inv_std: HashMap<NodeId, Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, index: usize) -> NodeId {
        self.push(Op::Input(index))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn parse(text: &str) -> Result<Graph> {
        let mut graph = Graph::new();
        let mut names: HashMap<String, NodeId> = HashMap::new();
        let mut inputs: HashMap<usize, NodeId> = HashMap::new();

        fn resolve(
            graph: &mut Graph,
            names: &HashMap<String, NodeId>,
            inputs: &mut HashMap<usize, NodeId>,
            name: &str,
        ) -> Result<NodeId> {
            if let Some(&id) = names.get(name) {
                return Ok(id);
            }
            if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                let id = *inputs.entry(idx).or_insert_with(|| graph.input(idx));
                return Ok(id);
            }
            Err(Error::argument(format!("undefined node {name:?}")))
        }

        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| {
                Error::argument(format!("line {}: expected `name = op ...`", lineno + 1))
            })?;
            let lhs = lhs.trim().to_string();
            let mut parts = rhs.split_whitespace();
            let op = parts
                .next()
                .ok_or_else(|| Error::argument(format!("line {}: missing op", lineno + 1)))?;
            let args: Vec<&str> = parts.collect();
            let need = |n: usize| -> Result<()> {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(Error::argument(format!(
                        "line {}: {op} takes {n} arguments, got {}",
                        lineno + 1,
                        args.len()
                    )))
                }
            };
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::argument(format!("line {}: bad number {s:?}", lineno + 1)))
            };
            let node = match op {
                "matmul" | "matmul_nt" | "add" | "sub" | "mul" | "mse" => {
                    need(2)?;
                    let a = resolve(&mut graph, &names, &mut inputs, args[0])?;
                    let b = resolve(&mut graph, &names, &mut inputs, args[1])?;
                    match op {
                        "matmul" => Op::MatMul(a, b),
                        "matmul_nt" => Op::MatMulNt(a, b),
                        "add" => Op::Add(a, b),
                        "sub" => Op::Sub(a, b),
                        "mul" => Op::Mul(a, b),
                        _ => Op::Mse(a, b),
                    }
                }
                "softmax" | "scale" => {
                    need(2)?;
                    let a = resolve(&mut graph, &names, &mut inputs, args[0])?;
                    let k = num(args[1])?;
                    if op == "softmax" {
                        Op::Softmax(a, k)
                    } else {
                        Op::Scale(a, k)
                    }
                }
                "sigmoid" | "silu" | "layernorm" | "meannorm" | "sum" | "mean" => {
                    need(1)?;
                    let a = resolve(&mut graph, &names, &mut inputs, args[0])?;
                    match op {
                        "sigmoid" => Op::Sigmoid(a),
                        "silu" => Op::Silu(a),
                        "layernorm" => Op::LayerNorm(a),
                        "meannorm" => Op::MeanNormalize(a),
                        "sum" => Op::Sum(a),
                        _ => Op::Mean(a),
                    }
                }
                other => {
                    return Err(Error::Capability(format!(
                        "op {other:?} has no backward rule (supported: {})",
                        SUPPORTED_OPS.join(", ")
                    )))
                }
            };
            let id = graph.push(node);
            names.insert(lhs, id);
        }
        if graph.is_empty() {
            return Err(Error::argument("empty graph"));
        }
        Ok(graph)
    }

    fn evaluate(&self, inputs: &[Grid2D]) -> Result<Evaluated> {
        let mut values: Vec<Grid2D> = Vec::with_capacity(self.nodes.len());
        let mut inv_std = HashMap::new();
        for (id, op) in self.nodes.iter().enumerate() {
            let v = match *op {
                Op::Input(i) => inputs
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::argument(format!("graph input x{i} not provided")))?,
                Op::MatMul(a, b) => matmul(&values[a], &values[b])?,
                Op::MatMulNt(a, b) => matmul_nt(&values[a], &values[b])?,
                Op::Add(a, b) => values[a].add(&values[b])?,
                Op::Sub(a, b) => values[a].sub(&values[b])?,
                Op::Mul(a, b) => values[a].mul(&values[b])?,
                Op::Softmax(a, s) => {
                    if s <= 0.0 {
                        return Err(Error::argument("softmax scale must be positive"));
                    }
                    softmax_rows(&values[a], s)
                }
                Op::Sigmoid(a) => sigmoid(&values[a]),
                Op::Silu(a) => silu(&values[a]),
                Op::LayerNorm(a) => {
                    let (y, is) = layer_norm(&values[a]);
                    inv_std.insert(id, is);
                    y
                }
                Op::Scale(a, k) => values[a].scale(k),
                Op::MeanNormalize(a) => {
                    let src = &values[a];
                    let m = src.mean();
                    if m.abs() < 1e-300 {
                        return Err(Error::DegenerateMap { mean: m });
                    }
                    Grid2D::new(src.rows(), src.cols(), mean_normalize(src.data()))?
                }
                Op::Sum(a) => Grid2D::filled(1, 1, values[a].sum()),
                Op::Mean(a) => Grid2D::filled(1, 1, values[a].mean()),
                Op::Mse(a, b) => Grid2D::filled(1, 1, mse(&values[a], &values[b])?),
            };
            values.push(v);
        }
        Ok(Evaluated { values, inv_std })
    }

    /// Scalar output of the graph.
    pub fn forward(&self, inputs: &[Grid2D]) -> Result<f64> {
        let ev = self.evaluate(inputs)?;
        let out = ev.values.last().expect("non-empty graph");
        if out.shape() != (1, 1) {
            return Err(Error::argument(format!(
                "graph output must be scalar, got {:?}",
                out.shape()
            )));
        }
        Ok(out.get(0, 0))
    }

    /// Output value and the gradient with respect to every input.
    pub fn backward(&self, inputs: &[Grid2D]) -> Result<(f64, Vec<Grid2D>)> {
        let ev = self.evaluate(inputs)?;
        let values = &ev.values;
        let out = values.last().expect("non-empty graph");
        if out.shape() != (1, 1) {
            return Err(Error::argument(format!(
                "graph output must be scalar, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Grid2D>> = vec![None; self.nodes.len()];
        grads[self.nodes.len() - 1] = Some(Grid2D::filled(1, 1, 1.0));

        fn acc(slot: &mut Option<Grid2D>, g: Grid2D) -> Result<()> {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match self.nodes[id] {
                Op::Input(_) => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, &values[b])?;
                    let db = super::grid::matmul_tn(&values[a], &g)?;
                    acc(&mut grads[a], da)?;
                    acc(&mut grads[b], db)?;
                }
                Op::MatMulNt(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let da = matmul(&g, &values[b])?;
                    let db = super::grid::matmul_tn(&g, &values[a])?;
                    acc(&mut grads[a], da)?;
                    acc(&mut grads[b], db)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a], g.clone())?;
                    acc(&mut grads[b], g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[a], g.clone())?;
                    acc(&mut grads[b], g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    acc(&mut grads[a], g.mul(&values[b])?)?;
                    acc(&mut grads[b], g.mul(&values[a])?)?;
                }
                Op::Softmax(a, s) => {
                    let d = softmax_rows_backward(&values[id], &g, s)?;
                    acc(&mut grads[a], d)?;
                }
                Op::Sigmoid(a) => {
                    let d = super::backward::sigmoid_backward(&values[id], &g)?;
                    acc(&mut grads[a], d)?;
                }
                Op::Silu(a) => {
                    let d = silu_backward(&values[a], &g)?;
                    acc(&mut grads[a], d)?;
                }
                Op::LayerNorm(a) => {
                    let d = layer_norm_backward(&values[id], &ev.inv_std[&id], &g)?;
                    acc(&mut grads[a], d)?;
                }
                Op::Scale(a, k) => acc(&mut grads[a], g.scale(k))?,
                Op::MeanNormalize(a) => {
                    let src = &values[a];
                    let d = mean_normalize_backward(src.data(), values[id].data(), g.data());
                    acc(&mut grads[a], Grid2D::new(src.rows(), src.cols(), d)?)?;
                }
                Op::Sum(a) => {
                    let (r, c) = values[a].shape();
                    acc(&mut grads[a], Grid2D::filled(r, c, g.get(0, 0)))?;
                }
                Op::Mean(a) => {
                    let (r, c) = values[a].shape();
                    let k = g.get(0, 0) / (r * c).max(1) as f64;
                    acc(&mut grads[a], Grid2D::filled(r, c, k))?;
                }
                Op::Mse(a, b) => {
                    let d = mse_backward(&values[a], &values[b])?.scale(g.get(0, 0));
                    acc(&mut grads[b], d.scale(-1.0))?;
                    acc(&mut grads[a], d)?;
                }
            }
        }

        let mut out_grads: Vec<Grid2D> = inputs
            .iter()
            .map(|x| Grid2D::zeros(x.rows(), x.cols()))
            .collect();
        for (id, op) in self.nodes.iter().enumerate() {
            if let (Op::Input(i), Some(g)) = (op, grads[id].take()) {
                out_grads[*i].add_assign(&g)?;
            }
        }
        Ok((out.get(0, 0), out_grads))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::argument(format!(
            "grad-check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Relative error used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the graph's analytic input gradients and
/// central differences with step `eps`.
pub fn grad_check(graph: &Graph, inputs: &[Grid2D], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let (_, analytic) = graph.backward(inputs)?;
    let mut f = |xs: &[Grid2D]| graph.forward(xs);
    check_against_differences(&mut f, inputs, &analytic, eps)
}

/// Compares `analytic` gradients of `f` at `inputs` with central differences.
/// Returns the max relative error over all entries.
pub fn check_against_differences(
    f: &mut dyn FnMut(&[Grid2D]) -> Result<f64>,
    inputs: &[Grid2D],
    analytic: &[Grid2D],
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    if analytic.len() != inputs.len() {
        return Err(Error::argument("one analytic gradient per input required"));
    }
    let mut work: Vec<Grid2D> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        if analytic[i].shape() != inputs[i].shape() {
            return Err(Error::Shape {
                op: "check_against_differences",
                left: inputs[i].shape(),
                right: analytic[i].shape(),
            });
        }
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = f(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let down = f(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
    }
    Ok(worst)
}
