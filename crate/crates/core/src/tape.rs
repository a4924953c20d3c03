//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is applied. [`Tape::backward`]
//! consumes the tape and walks the records once, in reverse order, so a fresh
//! tape is built for every forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Relu(Var),
    Square(Var),
    /// `sqrt(x + eps)`
    SqrtEps(Var),
    ColMean(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    VStack(Var, Var),
    SliceRows(Var, usize),
    /// Mean row entropy; saves the row-wise softmax and log-softmax.
    MeanEntropy(Var, Tensor, Tensor),
    /// Mean cross-entropy; saves the softmax.
    CrossEntropy(Var, Vec<usize>, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Which registered parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Only parameters flagged trainable in the [`ParamSet`].
    Trainable,
    /// Every parameter (full-network training).
    All,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::of`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers one named parameter.
    pub fn param(&mut self, name: &str, t: Tensor, requires_grad: bool) -> Var {
        let v = self.push(t, Op::Leaf, requires_grad);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers every entry of `params`, returning name → node.
    pub fn register(&mut self, params: &ParamSet, scope: GradScope) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, p)| {
                let rg = scope == GradScope::All || p.trainable;
                (name.to_string(), self.param(name, p.value.clone(), rg))
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (xv, rv) = (self.value(x), self.value(row));
        if xv.shape().len() != 2 || rv.shape() != [1, xv.cols()] {
            return Err(Error::Shape {
                op,
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let r = rv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % c]))
            .collect();
        Ok(Tensor::from_parts(xv.shape().to_vec(), data))
    }

    /// `x + row`, broadcasting a `1 × c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "sub_row", |a, b| a - b)?;
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::SubRow(x, row), ng))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::MulRow(x, row), ng))
    }

    pub fn div_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "div_row", |a, b| a / b)?;
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::DivRow(x, row), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.needs(x);
        self.push(out, Op::Square(x), ng)
    }

    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let out = self.value(x).map(|v| (v + eps).sqrt());
        let ng = self.needs(x);
        self.push(out, Op::SqrtEps(x), ng)
    }

    pub fn col_mean(&mut self, x: Var) -> Var {
        let out = self.value(x).col_mean();
        let ng = self.needs(x);
        self.push(out, Op::ColMean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::from_parts(vec![1], vec![self.value(x).sum()]);
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(vec![1], vec![t.sum() / t.len() as f64]);
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Stacks the rows of `b` below the rows of `a`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::vstack(&[self.value(a), self.value(b)])?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::VStack(a, b), ng))
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = xv.select_rows(&idx);
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows(x, start), ng))
    }

    /// Mean over rows of `-Σ_k p_k ln p_k`, with `p = softmax(row)`.
    pub fn mean_entropy(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() == 0 {
            return Err(Error::Shape {
                op: "mean_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let logp = log_softmax_rows(lv);
        let p = logp.map(f64::exp);
        let h = row_entropies(&p, &logp);
        let out = Tensor::from_parts(vec![1], vec![h.iter().sum::<f64>() / h.len() as f64]);
        let ng = self.needs(logits);
        Ok(self.push(out, Op::MeanEntropy(logits, p, logp), ng))
    }

    /// Mean over rows of `-ln softmax(row)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() || lv.rows() == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let logp = log_softmax_rows(lv);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logp.data()[i * k + y])
            .sum::<f64>()
            / labels.len() as f64;
        let p = logp.map(f64::exp);
        let out = Tensor::from_parts(vec![1], vec![loss]);
        let ng = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, labels.to_vec(), p), ng))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let seed = Tensor::from_parts(lv.shape().to_vec(), vec![1.0]);
        let Tape { nodes, params } = self;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }

        Ok(Gradients { grads, params })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![1, c], out)
}

fn broadcast_zip(x: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = x.cols();
    let r = row.data();
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % c]))
            .collect(),
    )
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[a.0].needs_grad {
                let bt = val(*b).transpose().expect("matrix");
                accumulate(nodes, grads, *a, g.matmul(&bt).expect("recorded shapes"));
            }
            if nodes[b.0].needs_grad {
                let at = val(*a).transpose().expect("matrix");
                accumulate(nodes, grads, *b, at.matmul(g).expect("recorded shapes"));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[a.0].needs_grad {
                accumulate(
                    nodes,
                    grads,
                    *a,
                    g.zip_map(bv, "mul", |x, y| x * y).expect("same shape"),
                );
            }
            if nodes[b.0].needs_grad {
                accumulate(
                    nodes,
                    grads,
                    *b,
                    g.zip_map(av, "mul", |x, y| x * y).expect("same shape"),
                );
            }
        }
        Op::AddRow(x, r) => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[r.0].needs_grad {
                accumulate(nodes, grads, *r, col_sum(g));
            }
        }
        Op::SubRow(x, r) => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[r.0].needs_grad {
                accumulate(nodes, grads, *r, col_sum(g).scale(-1.0));
            }
        }
        Op::MulRow(x, r) => {
            if nodes[x.0].needs_grad {
                accumulate(nodes, grads, *x, broadcast_zip(g, val(*r), |a, b| a * b));
            }
            if nodes[r.0].needs_grad {
                let gx = g
                    .zip_map(val(*x), "mul_row", |a, b| a * b)
                    .expect("same shape");
                accumulate(nodes, grads, *r, col_sum(&gx));
            }
        }
        Op::DivRow(x, r) => {
            let rv = val(*r);
            if nodes[x.0].needs_grad {
                accumulate(nodes, grads, *x, broadcast_zip(g, rv, |a, b| a / b));
            }
            if nodes[r.0].needs_grad {
                // d(x/r)/dr = -x/r² = -y/r
                let gy = g
                    .zip_map(&node.value, "div_row", |a, y| a * y)
                    .expect("same shape");
                let gy = broadcast_zip(&gy, rv, |a, b| -a / b);
                accumulate(nodes, grads, *r, col_sum(&gy));
            }
        }
        Op::Relu(x) => {
            let gx = g
                .zip_map(val(*x), "relu", |a, v| if v > 0.0 { a } else { 0.0 })
                .expect("same shape");
            accumulate(nodes, grads, *x, gx);
        }
        Op::Square(x) => {
            let gx = g
                .zip_map(val(*x), "square", |a, v| 2.0 * a * v)
                .expect("same shape");
            accumulate(nodes, grads, *x, gx);
        }
        Op::SqrtEps(x) => {
            let gx = g
                .zip_map(&node.value, "sqrt_eps", |a, y| a / (2.0 * y))
                .expect("same shape");
            accumulate(nodes, grads, *x, gx);
        }
        Op::ColMean(x) => {
            let xv = val(*x);
            let inv = 1.0 / xv.rows() as f64;
            let c = xv.cols();
            let gd = g.data();
            let data = (0..xv.len()).map(|i| gd[i % c] * inv).collect();
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::from_parts(xv.shape().to_vec(), data),
            );
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(xv.shape(), g.item()));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::full(xv.shape(), g.item() / xv.len() as f64),
            );
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.scale(*c)),
        Op::VStack(a, b) => {
            let ra = val(*a).rows();
            let c = g.cols();
            let (top, bottom) = g.data().split_at(ra * c);
            accumulate(
                nodes,
                grads,
                *a,
                Tensor::from_parts(vec![ra, c], top.to_vec()),
            );
            accumulate(
                nodes,
                grads,
                *b,
                Tensor::from_parts(vec![g.rows() - ra, c], bottom.to_vec()),
            );
        }
        Op::SliceRows(x, start) => {
            let xv = val(*x);
            let c = xv.cols();
            let mut full = Tensor::zeros(xv.shape());
            full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, *x, full);
        }
        Op::MeanEntropy(x, p, logp) => {
            // dH/dz_j = -p_j (ln p_j + H)
            let k = p.cols();
            let b = p.rows();
            let scale = g.item() / b as f64;
            let h = row_entropies(p, logp);
            let mut data = vec![0.0; p.len()];
            for (i, hi) in h.iter().enumerate() {
                for j in 0..k {
                    let idx = i * k + j;
                    let pj = p.data()[idx];
                    data[idx] = -scale * pj * (logp.data()[idx] + hi);
                }
            }
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::from_parts(p.shape().to_vec(), data),
            );
        }
        Op::CrossEntropy(x, labels, p) => {
            let k = p.cols();
            let scale = g.item() / labels.len() as f64;
            let mut data: Vec<f64> = p.data().iter().map(|v| v * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                data[i * k + y] -= scale;
            }
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::from_parts(p.shape().to_vec(), data),
            );
        }
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn of(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    fn param_grad(&self, name: &str, like: &Tensor) -> Tensor {
        match self.params.get(name) {
            Some(v) => self.of(*v, like.shape()),
            None => Tensor::zeros(like.shape()),
        }
    }

    /// Gradients for every trainable entry of `params`.
    pub fn for_params(&self, params: &ParamSet) -> Grads {
        let mut out = Grads::new();
        for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
            out.insert(name, self.param_grad(name, &p.value));
        }
        out
    }

    /// Gradients for every entry of `params`, trainable or not.
    pub fn for_all_params(&self, params: &ParamSet) -> Grads {
        let mut out = Grads::new();
        for (name, p) in params.iter() {
            out.insert(name, self.param_grad(name, &p.value));
        }
        out
    }
}

/// Runs the reverse sweep and returns gradients of every trainable parameter.
pub fn backward(tape: Tape, loss: Var, params: &ParamSet) -> Result<Grads> {
    Ok(tape.backward(loss)?.for_params(params))
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row_slice(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::from_parts(vec![logits.rows(), k], out)
}

/// Row-wise softmax with max subtraction; each row sums to one.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row_slice(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - mx).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_parts(vec![logits.rows(), k], out)
}

fn row_entropies(p: &Tensor, logp: &Tensor) -> Vec<f64> {
    (0..p.rows())
        .map(|r| {
            -p.row_slice(r)
                .iter()
                .zip(logp.row_slice(r))
                .map(|(&pk, &lk)| if pk == 0.0 { 0.0 } else { pk * lk })
                .sum::<f64>()
        })
        .collect()
}

/// Mean row entropy of `softmax(logits)` without recording anything.
pub fn mean_entropy_value(logits: &Tensor) -> f64 {
    let logp = log_softmax_rows(logits);
    let p = logp.map(f64::exp);
    let h = row_entropies(&p, &logp);
    h.iter().sum::<f64>() / h.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::numeric_grad_of_input;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[vec![-1.0, 0.0, 2.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.of(x, &[1, 3]).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[vec![-1.0, -2.0], vec![-0.5, -3.0]]));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.of(x, &[2, 2]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&t(&[vec![0.0, 0.0]]));
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = softmax_rows(&t(&[vec![2.0, 0.0, 0.0]]));
        let e2 = 2f64.exp();
        let expect = [e2 / (e2 + 2.0), 1.0 / (e2 + 2.0), 1.0 / (e2 + 2.0)];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.data()[0] - 0.78699).abs() < 1e-5);
        assert!((p.data()[1] - 0.10650).abs() < 1e-5);

        let p = softmax_rows(&t(&[vec![1000.0, 0.0]]));
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-300);
    }

    #[test]
    fn entropy_examples() {
        let h = mean_entropy_value(&t(&[vec![0.3; 4]]));
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!((h - 1.386294).abs() < 1e-6);

        let h = mean_entropy_value(&t(&[vec![50.0, -50.0]]));
        assert!((0.0..1e-40).contains(&h));

        let h = mean_entropy_value(&t(&[vec![0.0, 0.0]]));
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[vec![1.5; 5], vec![-2.0; 5]]));
        let e = tape.mean_entropy(x).unwrap();
        let g = tape.backward(e).unwrap();
        assert!(g.of(x, &[2, 5]).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[vec![1.0, 2.0]]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // each closure builds a scalar from one variable input on a fresh tape
        type Build = fn(&mut Tape, Var) -> Var;
        let consts = t(&[vec![0.7, -1.3, 2.1], vec![0.4, 0.9, -0.6]]);
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |tp, x| {
                let w = tp.constant(t(&[vec![1.0, -2.0], vec![0.5, 0.3], vec![-0.7, 1.1]]));
                let y = tp.matmul(x, w).unwrap();
                let y = tp.square(y);
                tp.sum(y)
            }),
            ("rows", |tp, x| {
                let r = tp.constant(t(&[vec![0.2, 1.5, -0.4]]));
                let a = tp.add_row(x, r).unwrap();
                let b = tp.mul_row(a, r).unwrap();
                let c = tp.sub_row(b, r).unwrap();
                let s = tp.square(c);
                tp.mean(s)
            }),
            ("batchnorm", |tp, x| {
                let m = tp.col_mean(x);
                let c = tp.sub_row(x, m).unwrap();
                let sq = tp.square(c);
                let v = tp.col_mean(sq);
                let d = tp.sqrt_eps(v, 1e-5);
                let y = tp.div_row(c, d).unwrap();
                let w = tp.constant(t(&[vec![1.0, 0.2, -0.3], vec![0.1, -0.5, 0.8]]));
                let y = tp.mul(y, w).unwrap();
                tp.sum(y)
            }),
            ("entropy", |tp, x| tp.mean_entropy(x).unwrap()),
            ("cross_entropy", |tp, x| {
                tp.cross_entropy(x, &[2, 0]).unwrap()
            }),
            ("stack_slice", |tp, x| {
                let c = tp.constant(t(&[vec![3.0, 1.0, -1.0]]));
                let s = tp.vstack(c, x).unwrap();
                let e = tp.mean_entropy(s).unwrap();
                let tail = tp.slice_rows(s, 1, 2).unwrap();
                let q = tp.square(tail);
                let q = tp.scale(q, 0.1);
                let q = tp.sum(q);
                tp.add(e, q).unwrap()
            }),
        ];
        for (name, build) in cases {
            let mut tape = Tape::new();
            let x = tape.variable(consts.clone());
            let loss = build(&mut tape, x);
            let analytic = tape.backward(loss).unwrap().of(x, consts.shape());
            let numeric = numeric_grad_of_input(&consts, 1e-5, |input| {
                let mut tp = Tape::new();
                let x = tp.variable(input.clone());
                let l = build(&mut tp, x);
                tp.value(l).item()
            });
            let err = analytic.max_abs_diff(&numeric);
            assert!(err < 1e-7, "{name}: {err}");
        }
    }
}
