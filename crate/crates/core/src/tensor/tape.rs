//! A small reverse-mode tape over [`Array`] values.
//!
//! The tape only knows the handful of primitives the joint models need. A
//! fresh tape is built for every batch; nodes are immutable once recorded.

use crate::error::{shape_err, MuirError, Result};

use super::array::{mode1_product, softmax, Array};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Mode1 { h: Var, z: Var },
    Softmax { x: Var },
    WeightedSum { items: Vec<Var>, weights: Var },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    Sum { x: Var },
    Mean { items: Vec<Var> },
    Mse { pred: Var, target: Array },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], one per recorded node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Array>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Unused nodes yield zeros.
    pub fn wrt(&self, var: Var) -> &Array {
        &self.adjoints[var.0]
    }

    pub fn take(&mut self, var: Var) -> Array {
        let shape = self.adjoints[var.0].shape().to_vec();
        std::mem::replace(&mut self.adjoints[var.0], Array::zeros(&shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    /// Records an input. Parameters, data and constants are all leaves.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn mode1_product(&mut self, h: Var, z: Var) -> Result<Var> {
        let out = mode1_product(self.value(h), self.value(z))?;
        Ok(self.push(out, Op::Mode1 { h, z }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 1 {
            return shape_err(format!("softmax of {:?}", self.value(x).shape()));
        }
        let out = softmax(self.value(x));
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// `sum_i weights[i] * items[i]` for same-shaped items and a weight vector.
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights);
        if w.ndim() != 1 || w.len() != items.len() || items.is_empty() {
            return shape_err(format!(
                "weighted sum of {} items with weights {:?}",
                items.len(),
                w.shape()
            ));
        }
        let mut out = Array::zeros(self.value(items[0]).shape());
        for (i, &item) in items.iter().enumerate() {
            let wi = self.value(weights).data()[i];
            out.add_scaled(self.value(item), wi)?;
        }
        Ok(self.push(
            out,
            Op::WeightedSum {
                items: items.to_vec(),
                weights,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() != 2 || bv.ndim() != 1 || xv.shape()[1] != bv.len() {
            return shape_err(format!(
                "bias {:?} for matrix {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let c = bv.len();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Average of scalar nodes.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return shape_err("mean of no items");
        }
        let mut total = 0.0;
        for &v in items {
            total += self.value(v).item()?;
        }
        let out = Array::scalar(total / items.len() as f64);
        Ok(self.push(
            out,
            Op::Mean {
                items: items.to_vec(),
            },
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: Array) -> Result<Var> {
        let p = self.value(pred);
        if !p.same_shape(&target) || p.is_empty() {
            return shape_err(format!(
                "mse of {:?} against {:?}",
                p.shape(),
                target.shape()
            ));
        }
        let n = p.len() as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Array::scalar(loss), Op::Mse { pred, target }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Back-propagates from a scalar `loss`, visiting nodes in reverse order
    /// of recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(MuirError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Array> = self
            .nodes
            .iter()
            .map(|n| Array::zeros(n.value.shape()))
            .collect();
        adj[loss.0].data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut adj[idx], Array::zeros(&[]));
            if g.data().iter().all(|&v| v == 0.0) {
                adj[idx] = g;
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[idx] = g;
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op, out: &Array, g: &Array, adj: &mut [Array]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Mode1 { h, z } => {
                let hv = self.value(*h);
                let zv = self.value(*z);
                let slice = g.len();
                for (k, &zk) in zv.data().iter().enumerate() {
                    let hs = &hv.data()[k * slice..(k + 1) * slice];
                    let mut dz = 0.0;
                    for (&gij, &hij) in g.data().iter().zip(hs) {
                        dz += gij * hij;
                    }
                    adj[z.0].data_mut()[k] += dz;
                    let dh = &mut adj[h.0].data_mut()[k * slice..(k + 1) * slice];
                    for (d, &gij) in dh.iter_mut().zip(g.data()) {
                        *d += gij * zk;
                    }
                }
            }
            Op::Softmax { x } => {
                let dot: f64 = g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                let dx = adj[x.0].data_mut();
                for (i, &p) in out.data().iter().enumerate() {
                    dx[i] += p * (g.data()[i] - dot);
                }
            }
            Op::WeightedSum { items, weights } => {
                for (i, item) in items.iter().enumerate() {
                    let wi = self.value(*weights).data()[i];
                    let dw: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*item).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    adj[weights.0].data_mut()[i] += dw;
                    adj[item.0].add_scaled(g, wi)?;
                }
            }
            Op::MatMul { a, b } => {
                let da = g.matmul(&self.value(*b).transpose()?)?;
                let db = self.value(*a).transpose()?.matmul(g)?;
                adj[a.0].add_scaled(&da, 1.0)?;
                adj[b.0].add_scaled(&db, 1.0)?;
            }
            Op::Add { a, b } => {
                adj[a.0].add_scaled(g, 1.0)?;
                adj[b.0].add_scaled(g, 1.0)?;
            }
            Op::AddBias { x, bias } => {
                adj[x.0].add_scaled(g, 1.0)?;
                let c = self.value(*bias).len();
                let db = adj[bias.0].data_mut();
                for (i, &v) in g.data().iter().enumerate() {
                    db[i % c] += v;
                }
            }
            Op::Mul { a, b } => {
                let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                adj[a.0].add_scaled(&da, 1.0)?;
                adj[b.0].add_scaled(&db, 1.0)?;
            }
            Op::Scale { x, factor } => {
                adj[x.0].add_scaled(g, *factor)?;
            }
            Op::Relu { x } => {
                let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let dx = g.zip_map(&mask, |a, b| a * b)?;
                adj[x.0].add_scaled(&dx, 1.0)?;
            }
            Op::Tanh { x } => {
                let dx = g.zip_map(out, |a, t| a * (1.0 - t * t))?;
                adj[x.0].add_scaled(&dx, 1.0)?;
            }
            Op::Sum { x } => {
                let s = g.item()?;
                for v in adj[x.0].data_mut() {
                    *v += s;
                }
            }
            Op::Mean { items } => {
                let s = g.item()? / items.len() as f64;
                for item in items {
                    adj[item.0].data_mut()[0] += s;
                }
            }
            Op::Mse { pred, target } => {
                let s = g.item()? * 2.0 / target.len() as f64;
                let p = self.value(*pred);
                let dp = adj[pred.0].data_mut();
                for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
                    dp[i] += s * (a - b);
                }
            }
            Op::Reshape { x } => {
                let dx = adj[x.0].data_mut();
                for (d, &v) in dx.iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
        }
        Ok(())
    }
}
