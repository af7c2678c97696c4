//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Nodes are appended in evaluation order, so the record is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! Constants are recorded too but never receive gradients, and nothing that
//! depends only on constants is differentiated.

use super::array::{self, Scalar, Tensor, KL_FLOOR};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RowSums(Var),
    Sum(Var),
    Kl(Var, Var),
    SqDist(Var, Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<Var>, Vec<Vec<usize>>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(value, op, tracked)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = array::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.derived(out, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = array::softmax_rows(self.value(a));
        self.derived(out, Op::Softmax(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    /// `M × N → M × 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, _) = x.dim2();
        let sums = (0..m).map(|i| x.row_slice(i).iter().copied().sum()).collect();
        let out = Tensor::column(sums);
        self.derived(out, Op::RowSums(a), &[a])
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    /// KL divergence between two probability tensors of equal size.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let out = Tensor::scalar(array::kl_div(self.value(p), self.value(q))?);
        Ok(self.derived(out, Op::Kl(p, q), &[p, q]))
    }

    /// Squared Euclidean distance (not averaged).
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = Tensor::scalar(array::mse(self.value(x), self.value(y))?);
        Ok(self.derived(out, Op::SqDist(x, y), &[x, y]))
    }

    /// `-log softmax(logits)[target]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.value(logits);
        if target >= x.numel() {
            return Err(Error::contract(format!(
                "target class {target} out of range for {} logits",
                x.numel()
            )));
        }
        let max = x.data().iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = x.data().iter().map(|&v| (v - max).exp()).sum();
        let lse = max + total.ln();
        let probs: Vec<T> = x.data().iter().map(|&v| (v - lse).exp()).collect();
        let out = Tensor::scalar(lse - x.data()[target]);
        Ok(self.derived(out, Op::CrossEntropy { logits, target, probs }, &[logits]))
    }

    /// Copies the listed rows of `a`, in order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (m, _) = x.dim2();
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::contract(format!("row {bad} out of range for {m} rows")));
        }
        let out = x.select_rows(rows);
        Ok(self.derived(out, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Inverse of [`Tape::gather_rows`]: row `j` of `parts[q]` lands at row
    /// `index[q][j]` of the output. Every output row must be written exactly
    /// once.
    pub fn scatter_rows(&mut self, parts: &[Var], index: &[Vec<usize>]) -> Result<Var> {
        if parts.len() != index.len() || parts.is_empty() {
            return Err(Error::contract("scatter_rows: parts and index lists disagree"));
        }
        let cols = self.value(parts[0]).dim2().1;
        let total: usize = index.iter().map(Vec::len).sum();
        let mut data = vec![T::zero(); total * cols];
        let mut written = vec![false; total];
        for (&p, rows) in parts.iter().zip(index) {
            let x = self.value(p);
            if x.dim2() != (rows.len(), cols) {
                return Err(Error::shape("scatter_rows", x.shape(), &[rows.len(), cols]));
            }
            for (j, &r) in rows.iter().enumerate() {
                if r >= total || written[r] {
                    return Err(Error::contract(format!("scatter_rows: row {r} invalid or repeated")));
                }
                written[r] = true;
                data[r * cols..(r + 1) * cols].copy_from_slice(x.row_slice(j));
            }
        }
        let out = Tensor::new([total, cols], data)?;
        Ok(self.derived(out, Op::ScatterRows(parts.to_vec(), index.to_vec()), parts))
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    acc(*a, array::matmul(g, &bv.transpose())?);
                }
                if self.tracked(*b) {
                    acc(*b, array::matmul(&av.transpose(), g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Softmax(a) => {
                // dx_ij = y_ij (g_ij - Σ_k g_ik y_ik)
                let y = &node.value;
                let (m, n) = y.dim2();
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    acc(*a, g.mul(bv)?);
                }
                if self.tracked(*b) {
                    acc(*b, g.mul(av)?);
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::RowSums(a) => {
                let shape = self.value(*a).shape().to_vec();
                let (m, n) = self.value(*a).dim2();
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    dx.extend(std::iter::repeat_n(g.data()[i], n));
                }
                acc(*a, Tensor::new(shape, dx)?);
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape().to_vec(), gs));
            }
            Op::Kl(p, q) => {
                let gs = g.data()[0];
                let floor = T::lit(KL_FLOOR);
                let (pv, qv) = (self.value(*p), self.value(*q));
                if self.tracked(*p) {
                    let d = pv.zip_with(qv, "kl_div", |pi, qi| {
                        gs * (pi.max(floor).ln() - qi.max(floor).ln() + T::one())
                    })?;
                    acc(*p, d);
                }
                if self.tracked(*q) {
                    let d = pv.zip_with(qv, "kl_div", |pi, qi| {
                        if qi > floor {
                            -gs * pi / qi
                        } else {
                            T::zero()
                        }
                    })?;
                    acc(*q, d);
                }
            }
            Op::SqDist(x, y) => {
                let two = T::lit(2.0) * g.data()[0];
                let diff = self.value(*x).sub(self.value(*y))?.scale(two);
                acc(*y, diff.scale(-T::one()));
                acc(*x, diff);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let gs = g.data()[0];
                let mut d = probs.clone();
                d[*target] = d[*target] - T::one();
                let shape = self.value(*logits).shape().to_vec();
                acc(*logits, Tensor::new(shape, d.into_iter().map(|x| x * gs).collect())?);
            }
            Op::GatherRows(a, rows) => {
                let src = self.value(*a);
                let (_, n) = src.dim2();
                let mut dx = Tensor::zeros(src.shape().to_vec());
                for (j, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for (d, &gv) in dst.iter_mut().zip(g.row_slice(j)) {
                        *d = *d + gv;
                    }
                }
                acc(*a, dx);
            }
            Op::ScatterRows(parts, index) => {
                for (&p, rows) in parts.iter().zip(index) {
                    if self.tracked(p) {
                        let shape = self.value(p).shape().to_vec();
                        acc(p, g.select_rows(rows).reshape(shape)?);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}
