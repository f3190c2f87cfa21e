//! Reverse-mode tape.
//!
//! Every value lives in a node; a node remembers the op that produced it.
//! Parameters enter through [`Graph::param`], which caches one leaf per
//! `(slot, tensor)` pair so that agents bound to the same slot share a leaf and
//! their contributions sum during [`Graph::backward`].

use std::collections::{BTreeMap, HashMap};

use super::store::{ParamStore, SlotId};
use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param { slot: SlotId, index: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    SumCols(Var),
    Mean(Var),
    Sum(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Square(Var),
    Huber(Var, f64),
    BroadcastRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by slot; each entry holds one tensor per slot tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<SlotId, Vec<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: SlotId) -> Option<&[Tensor]> {
        self.map.get(&slot).map(Vec::as_slice)
    }

    pub fn slots(&self) -> impl Iterator<Item = (SlotId, &[Tensor])> {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, slot: SlotId, tensors: Vec<Tensor>) {
        self.map.insert(slot, tensors);
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flatten()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().flatten().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.map.values_mut().flatten() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (slot, ts) in &other.map {
            match self.map.get_mut(slot) {
                Some(mine) => {
                    for (a, b) in mine.iter_mut().zip(ts) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
                None => {
                    self.map.insert(*slot, ts.clone());
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(SlotId, usize), Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input. Gradients never flow past it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, slot: SlotId, index: usize) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(&(slot, index)) {
            return Ok(v);
        }
        let t = store.tensor(slot, index)?.clone();
        let v = self.push(t, Op::Param { slot, index });
        self.params.insert((slot, index), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len() || self.value(a).rows() != self.value(b).rows() {
            return Err(NnError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).log_softmax();
        self.push(out, Op::LogSoftmax(a))
    }

    /// Picks column `idx[r]` of row `r`, giving a `[rows, 1]` column.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NnError> {
        let t = self.value(a);
        if idx.len() != t.rows() {
            return Err(NnError::Shape(format!(
                "gather of {} indices from {} rows",
                idx.len(),
                t.rows()
            )));
        }
        let c = t.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(NnError::Index(format!("column {bad} of {c}")));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| t.row(r)[i]).collect();
        let out = Tensor::column(data);
        Ok(self.push(out, Op::Gather(a, idx)))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_cols();
        self.push(out, Op::SumCols(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Clamps into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "min")?;
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x <= y { x } else { y });
        Ok(self.push(out, Op::Min(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let out = self.value(a).map(|x| huber(x, delta));
        self.push(out, Op::Huber(a, delta))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let out = self.value(a).broadcast_rows(rows);
        self.push(out, Op::BroadcastRows(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();
        let mut reached = false;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { slot, index } => {
                    reached = true;
                    let entry = out.map.entry(*slot).or_default();
                    if entry.len() <= *index {
                        entry.resize(*index + 1, Tensor::zeros(&[0]));
                    }
                    entry[*index] = g;
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul_t(bv);
                    let gb = av.t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    let gb = g.sum_rows();
                    let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb.into_data())?;
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *bias, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|x| x * k)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let n = node.value.cols();
                    let mut ga = g.clone();
                    for (r, row) in ga.data_mut().chunks_mut(n).enumerate() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for (x, &lp) in row.iter_mut().zip(node.value.row(r)) {
                            *x -= lp.exp() * gsum;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut ga = Tensor::zeros(src.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        ga.data_mut()[r * c + i] = g.data()[r];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut ga = Tensor::zeros(src.shape());
                    for (r, row) in ga.data_mut().chunks_mut(c).enumerate() {
                        row.fill(g.data()[r]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let k = g.item() / src.len() as f64;
                    acc(&mut grads, *a, Tensor::full(src.shape(), k));
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    acc(&mut grads, *a, Tensor::full(src.shape(), g.item()));
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(self.value(*a), |x, y| {
                        if y >= *lo && y <= *hi {
                            x
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = g;
                    for ((x, y), (&p, &q)) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(gb.data_mut().iter_mut())
                        .zip(av.data().iter().zip(bv.data()))
                    {
                        if p <= q {
                            *y = 0.0;
                        } else {
                            *x = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Huber(a, delta) => {
                    let d = *delta;
                    let ga = g.zip_map(self.value(*a), |x, y| {
                        if y.abs() <= d {
                            x * y
                        } else {
                            x * d * y.signum()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    let src = self.value(*a);
                    let ga = Tensor::new(src.shape().to_vec(), g.sum_rows().into_data())?;
                    acc(&mut grads, *a, ga);
                }
            }
        }
        if !reached {
            return Err(NnError::Detached);
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (x, y) in existing.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}
