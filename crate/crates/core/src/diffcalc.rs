//! Reverse-mode differentiation over dense 2-D `f64` tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! parents have strictly smaller indices, so the tape order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Vectors are `1 x d` rows, batches are `n x d`
//! matrices and scalars are `1 x 1`.
//!
//! Gradients accumulate with `+=`: a node consumed by several downstream
//! terms receives the sum of their contributions. Call [`Graph::zero_grad`]
//! before re-running `backward` on the same tape.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{shape_str, Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Concat(Vec<NodeId>),
    GatherRows(Vec<NodeId>, Vec<(usize, usize)>),
    SliceCols(NodeId, usize),
    Sum(NodeId),
    SumCols(NodeId),
    SqL2(NodeId, NodeId),
    NormalizeRows(NodeId, f64),
    LogSumExpRows(NodeId, Option<Array2<bool>>),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::SqL2(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::SumCols(a)
            | Op::NormalizeRows(a, _)
            | Op::LogSumExpRows(a, _) => vec![*a],
            Op::Concat(parts) | Op::GatherRows(parts, _) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    data: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: operand shapes differ, {} vs {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    Ok(())
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

    fn push(&mut self, data: Tensor, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            data,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, data: Tensor) -> NodeId {
        self.nodes.push(Node {
            data,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Tensor) -> NodeId {
        self.nodes.push(Node {
            data,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn row(&mut self, values: &[f64]) -> NodeId {
        let data = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("row vector shape");
        self.param(data)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].data.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[[0, 0]]
    }

    /// Accumulated gradient, or `None` if the node was not reached by `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient with an unreached node reported as zeros of the node's shape.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].data.raw_dim()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree, {} vs {}",
                shape_str(x.shape()),
                shape_str(y.shape())
            )));
        }
        let out = x.dot(y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("div", self.value(a), self.value(b))?;
        if self.value(b).iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("div: zero divisor".into()));
        }
        let out = self.value(a) / self.value(b);
        Ok(self.push(out, Op::Div(a, b)))
    }

    /// `a (n x d) + bias (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.nrows() != 1 || b.ncols() != x.ncols() {
            return Err(Error::Dimension(format!(
                "add_row: bias {} does not broadcast over {}",
                shape_str(b.shape()),
                shape_str(x.shape())
            )));
        }
        let out = x + b;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive entry {v}")));
        }
        let out = self.value(a).mapv(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    /// `|x|`; the derivative at zero is taken as 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// `sqrt(x)`; the derivative at zero is taken as 0 rather than infinity.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative entry {v}")));
        }
        let out = self.value(a).mapv(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    /// Concatenate along the last (column) axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no parts".into()))?;
        let rows = self.value(*first).nrows();
        for p in parts {
            if self.value(*p).nrows() != rows {
                return Err(Error::Dimension(format!(
                    "concat: row counts differ, {} vs {}",
                    shape_str(self.value(*first).shape()),
                    shape_str(self.value(*p).shape())
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Dimension(format!("concat: {e}")))?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Stack rows picked from several nodes: output row `r` is row
    /// `index[r].1` of `parts[index[r].0]`. All parts must share a width.
    pub fn gather_rows(&mut self, parts: &[NodeId], index: &[(usize, usize)]) -> Result<NodeId> {
        let width = parts
            .first()
            .map(|p| self.value(*p).ncols())
            .ok_or_else(|| Error::Dimension("gather_rows: no parts".into()))?;
        if let Some(p) = parts.iter().find(|p| self.value(**p).ncols() != width) {
            return Err(Error::Dimension(format!(
                "gather_rows: widths differ, {} vs {}",
                shape_str(self.value(parts[0]).shape()),
                shape_str(self.value(*p).shape())
            )));
        }
        let mut out = Tensor::zeros((index.len(), width));
        for (r, &(part, src)) in index.iter().enumerate() {
            let x = parts
                .get(part)
                .map(|p| self.value(*p))
                .filter(|x| src < x.nrows())
                .ok_or_else(|| Error::Index(format!("gather_rows: ({part}, {src}) out of range")))?;
            out.row_mut(r).assign(&x.row(src));
        }
        Ok(self.push(out, Op::GatherRows(parts.to_vec(), index.to_vec())))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start >= end || end > x.ncols() {
            return Err(Error::Dimension(format!(
                "slice_cols: range {start}..{end} invalid for {}",
                shape_str(x.shape())
            )));
        }
        let out = x.slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Split every row into its first and second half: `(shared, specific)`.
    pub fn slice_halves(&mut self, e: NodeId) -> Result<(NodeId, NodeId)> {
        let d = self.value(e).ncols();
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "slice_halves: feature width {d} is not a positive even number"
            )));
        }
        let first = self.slice_cols(e, 0, d / 2)?;
        let second = self.slice_cols(e, d / 2, d)?;
        Ok((first, second))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `n x d -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let out = x.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    /// Squared Euclidean distance over all entries, `sum (a - b)^2`.
    pub fn sq_l2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("sq_l2", self.value(a), self.value(b))?;
        let d = self.value(a) - self.value(b);
        let total = d.iter().map(|v| v * v).sum::<f64>();
        Ok(self.push(Array2::from_elem((1, 1), total), Op::SqL2(a, b)))
    }

    /// Scale every row to unit Euclidean norm; rows with norm below `eps`
    /// are divided by `eps` instead.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row /= n;
        }
        self.push(out, Op::NormalizeRows(a, eps))
    }

    /// Row-wise `log sum exp`, optionally restricted to the `true` entries of
    /// `mask`. Returns `n x 1`. Stabilized by subtracting each row's maximum.
    pub fn logsumexp_rows(&mut self, a: NodeId, mask: Option<Array2<bool>>) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(m) = &mask {
            if m.dim() != x.dim() {
                return Err(Error::Dimension(format!(
                    "logsumexp_rows: mask {} vs input {}",
                    shape_str(m.shape()),
                    shape_str(x.shape())
                )));
            }
        }
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[[i, j]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "logsumexp_rows: row {i} has no admissible entries"
                )));
            }
            let s: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, v)| (v - max).exp())
                .sum();
            out[[i, 0]] = max + s.ln();
        }
        Ok(self.push(out, Op::LogSumExpRows(a, mask)))
    }

    /// Populate gradients of every node reachable from the scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got {}",
                shape_str(&[r, c])
            )));
        }
        accumulate(&mut self.nodes[root.0], &Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            propagate(before, node, g);
        }
        Ok(())
    }
}

fn accumulate(node: &mut Node, g: &Tensor) {
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => *acc += g,
        None => node.grad = Some(g.clone()),
    }
}

fn propagate(before: &mut [Node], node: &Node, g: &Tensor) {
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let ga = g.dot(&before[b.0].data.t());
            let gb = before[a.0].data.t().dot(g);
            accumulate(&mut before[a.0], &ga);
            accumulate(&mut before[b.0], &gb);
        }
        Op::Transpose(a) => {
            let ga = g.t().to_owned();
            accumulate(&mut before[a.0], &ga);
        }
        Op::Add(a, b) => {
            accumulate(&mut before[a.0], g);
            accumulate(&mut before[b.0], g);
        }
        Op::Sub(a, b) => {
            accumulate(&mut before[a.0], g);
            accumulate(&mut before[b.0], &(-g));
        }
        Op::Mul(a, b) => {
            let ga = g * &before[b.0].data;
            let gb = g * &before[a.0].data;
            accumulate(&mut before[a.0], &ga);
            accumulate(&mut before[b.0], &gb);
        }
        Op::Div(a, b) => {
            let bv = &before[b.0].data;
            let ga = g / bv;
            let gb = -(g * out) / bv;
            accumulate(&mut before[a.0], &ga);
            accumulate(&mut before[b.0], &gb);
        }
        Op::AddRow(a, bias) => {
            let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            accumulate(&mut before[a.0], g);
            accumulate(&mut before[bias.0], &gb);
        }
        Op::Scale(a, c) => accumulate(&mut before[a.0], &(g * *c)),
        Op::AddScalar(a) => accumulate(&mut before[a.0], g),
        Op::Relu(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(&before[a.0].data).for_each(|d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            accumulate(&mut before[a.0], &ga);
        }
        Op::Exp(a) => accumulate(&mut before[a.0], &(g * out)),
        Op::Log(a) => {
            let ga = g / &before[a.0].data;
            accumulate(&mut before[a.0], &ga);
        }
        Op::Abs(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(&before[a.0].data).for_each(|d, &x| {
                *d *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            });
            accumulate(&mut before[a.0], &ga);
        }
        Op::Sqrt(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(out).for_each(|d, &y| {
                *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 };
            });
            accumulate(&mut before[a.0], &ga);
        }
        Op::Concat(parts) => {
            let mut start = 0;
            for p in parts {
                let w = before[p.0].data.ncols();
                let gp = g.slice(s![.., start..start + w]).to_owned();
                accumulate(&mut before[p.0], &gp);
                start += w;
            }
        }
        Op::GatherRows(parts, index) => {
            let mut grads: Vec<Option<Tensor>> = vec![None; parts.len()];
            for (r, &(part, src)) in index.iter().enumerate() {
                let acc = grads[part]
                    .get_or_insert_with(|| Tensor::zeros(before[parts[part].0].data.raw_dim()));
                let mut dst = acc.row_mut(src);
                dst += &g.row(r);
            }
            for (p, gp) in parts.iter().zip(grads) {
                if let Some(gp) = gp {
                    accumulate(&mut before[p.0], &gp);
                }
            }
        }
        Op::SliceCols(a, start) => {
            let parent = &before[a.0];
            if !parent.requires_grad {
                return;
            }
            let mut ga = Tensor::zeros(parent.data.raw_dim());
            ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
            accumulate(&mut before[a.0], &ga);
        }
        Op::Sum(a) => {
            let ga = Tensor::from_elem(before[a.0].data.raw_dim(), g[[0, 0]]);
            accumulate(&mut before[a.0], &ga);
        }
        Op::SumCols(a) => {
            let shape = before[a.0].data.raw_dim();
            let ga = g
                .broadcast(shape)
                .expect("row sum gradient broadcasts")
                .to_owned();
            accumulate(&mut before[a.0], &ga);
        }
        Op::SqL2(a, b) => {
            let d = (&before[a.0].data - &before[b.0].data) * (2.0 * g[[0, 0]]);
            accumulate(&mut before[b.0], &(-&d));
            accumulate(&mut before[a.0], &d);
        }
        Op::NormalizeRows(a, eps) => {
            let x = &before[a.0].data;
            let mut ga = Tensor::zeros(x.raw_dim());
            for i in 0..x.nrows() {
                let xr = x.row(i);
                let norm = xr.dot(&xr).sqrt();
                let gr = g.row(i);
                if norm > *eps {
                    let yr = out.row(i);
                    let proj = yr.dot(&gr);
                    let row = (&gr - &(&yr * proj)) / norm;
                    ga.row_mut(i).assign(&row);
                } else {
                    ga.row_mut(i).assign(&(&gr / *eps));
                }
            }
            accumulate(&mut before[a.0], &ga);
        }
        Op::LogSumExpRows(a, mask) => {
            let x = &before[a.0].data;
            let mut ga = Tensor::zeros(x.raw_dim());
            for i in 0..x.nrows() {
                let lse = out[[i, 0]];
                let gi = g[[i, 0]];
                for j in 0..x.ncols() {
                    if mask.as_ref().is_none_or(|m| m[[i, j]]) {
                        ga[[i, j]] = gi * (x[[i, j]] - lse).exp();
                    }
                }
            }
            accumulate(&mut before[a.0], &ga);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` (which maps leaf params to a
    /// scalar) at the given inputs.
    fn gradcheck<F>(inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &ids);
        g.backward(root).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = g.grad_or_zeros(ids[k]);
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Tensor> = inputs.to_vec();
                    let flat = perturbed[k].as_slice_mut().unwrap();
                    flat[idx] += delta;
                    let mut g2 = Graph::new();
                    let ids2: Vec<_> = perturbed.iter().map(|t| g2.param(t.clone())).collect();
                    let r = build(&mut g2, &ids2);
                    g2.scalar(r)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < tol || (a - numeric).abs() < 1e-8,
                    "input {k} entry {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_identity_and_direct() {
        let mut g = Graph::new();
        let i2 = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let m = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &array![[1.0, 2.0], [3.0, 4.0]]);

        let a = g.constant(array![[1.0, 0.0]]);
        let b = g.constant(array![[2.0], [3.0]]);
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p), &array![[2.0]]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros((3, 4)));
        let b = g.constant(Tensor::zeros((3, 2)));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[3x4]") && err.contains("[3x2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        gradcheck(
            &[a, b],
            |g, ids| {
                let p = g.matmul(ids[0], ids[1]).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.row(&[-1.0, 0.0, 2.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r), &array![[0.0, 0.0, 2.0]]);
        let a = g.row(&[1.0, 2.0]);
        let b = g.row(&[3.0, 4.0]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &array![[4.0, 6.0]]);
    }

    #[test]
    fn exp_gradient_is_exp() {
        let mut g = Graph::new();
        let x = g.row(&[0.0, 1.0]);
        let e = g.exp(x);
        let s = g.sum(e);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert!((gx[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((gx[[0, 1]] - std::f64::consts::E).abs() < 1e-15);
        gradcheck(
            &[array![[0.0, 1.0]]],
            |g, ids| {
                let e = g.exp(ids[0]);
                g.sum(e)
            },
            1e-6,
        );
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.row(&[1.0, 0.0]);
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        let y = g.row(&[1.0, -2.0]);
        assert!(matches!(g.log(y), Err(Error::Domain(_))));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.row(&[-1.0, 0.0, 2.0]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.row(&[1.0, 2.0]);
        let b = g.row(&[1.0]);
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.mul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.sq_l2(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_and_split_round_trip() {
        let mut g = Graph::new();
        let a = g.row(&[1.0, 2.0]);
        let b = g.row(&[3.0]);
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c), &array![[1.0, 2.0, 3.0]]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &array![[1.0, 1.0]]);
        assert_eq!(g.grad(b).unwrap(), &array![[1.0]]);

        let mut g = Graph::new();
        let e = g.row(&[1.0, 2.0, 3.0, 4.0]);
        let (ec, es) = g.slice_halves(e).unwrap();
        assert_eq!(g.value(ec), &array![[1.0, 2.0]]);
        assert_eq!(g.value(es), &array![[3.0, 4.0]]);
        let back = g.concat(&[ec, es]).unwrap();
        assert_eq!(g.value(back), g.value(e));
        let s = g.sum(es);
        g.backward(s).unwrap();
        assert_eq!(g.grad(e).unwrap(), &array![[0.0, 0.0, 1.0, 1.0]]);
    }

    #[test]
    fn concat_row_mismatch_and_odd_halves() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros((2, 2)));
        let b = g.constant(Tensor::zeros((3, 2)));
        assert!(matches!(g.concat(&[a, b]), Err(Error::Dimension(_))));
        let odd = g.row(&[1.0, 2.0, 3.0]);
        assert!(matches!(g.slice_halves(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn sq_l2_values_and_gradient() {
        let mut g = Graph::new();
        let a = g.row(&[3.0, 4.0]);
        let b = g.row(&[0.0, 0.0]);
        let d = g.sq_l2(a, b).unwrap();
        assert_eq!(g.scalar(d), 25.0);
        let same = g.sq_l2(a, a).unwrap();
        assert_eq!(g.scalar(same), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 1, 8);
        let y = random(&mut rng, 1, 8);
        gradcheck(&[x, y], |g, ids| g.sq_l2(ids[0], ids[1]).unwrap(), 1e-6);
    }

    #[test]
    fn backward_base_cases() {
        let mut g = Graph::new();
        let x = g.row(&[3.0]);
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 1.0);

        let mut g = Graph::new();
        let x = g.row(&[3.0]);
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 2.0);

        let mut g = Graph::new();
        let x = g.row(&[3.0, 1.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut g = Graph::new();
        let x = g.row(&[2.0]);
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 5.0);
        g.zero_grad();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let bias = random(&mut rng, 1, 4);
        let pos = a.mapv(|v| v.abs() + 0.5);
        let tol = 1e-5;

        gradcheck(&[a.clone(), b.clone()], |g, i| {
            let t = g.sub(i[0], i[1]).unwrap();
            let m = g.mul(t, i[0]).unwrap();
            g.sum(m)
        }, tol);
        gradcheck(&[a.clone(), pos.clone()], |g, i| {
            let d = g.div(i[0], i[1]).unwrap();
            g.sum(d)
        }, tol);
        gradcheck(&[a.clone(), bias], |g, i| {
            let r = g.add_row(i[0], i[1]).unwrap();
            let r = g.relu(r);
            let r = g.mul(r, r).unwrap();
            g.sum(r)
        }, tol);
        gradcheck(std::slice::from_ref(&pos), |g, i| {
            let l = g.log(i[0]).unwrap();
            let q = g.sqrt(i[0]).unwrap();
            let s = g.add(l, q).unwrap();
            let s = g.scale(s, 0.7);
            let s = g.add_scalar(s, 1.0);
            g.sum(s)
        }, tol);
        gradcheck(std::slice::from_ref(&a), |g, i| {
            let t = g.transpose(i[0]);
            let p = g.matmul(i[0], t).unwrap();
            let p = g.abs(p);
            g.mean(p)
        }, tol);
        gradcheck(&[a.clone(), b.clone()], |g, i| {
            let c = g.concat(&[i[0], i[1]]).unwrap();
            let c2 = g.mul(c, c).unwrap();
            let s = g.slice_cols(c2, 2, 7).unwrap();
            let r = g.sum_cols(s);
            let r = g.exp(r);
            g.sum(r)
        }, tol);
        gradcheck(std::slice::from_ref(&a), |g, i| {
            let n = g.normalize_rows(i[0], 1e-12);
            let t = g.transpose(n);
            let s = g.matmul(n, t).unwrap();
            let s = g.scale(s, 2.0);
            let mask = Array2::from_shape_fn((3, 3), |(r, c)| r != c);
            let l = g.logsumexp_rows(s, Some(mask)).unwrap();
            g.sum(l)
        }, tol);
        gradcheck(std::slice::from_ref(&b), |g, i| {
            let l = g.logsumexp_rows(i[0], None).unwrap();
            g.sum(l)
        }, tol);
        gradcheck(&[a, b], |g, i| {
            let r = g.gather_rows(&[i[0], i[1]], &[(1, 2), (0, 0), (1, 2), (0, 1)]).unwrap();
            let r = g.mul(r, r).unwrap();
            g.sum(r)
        }, tol);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.row(&[1000.0, 1000.0]);
        let l = g.logsumexp_rows(x, None).unwrap();
        assert!((g.scalar(l) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let mask = Array2::from_elem((1, 2), false);
        assert!(matches!(g.logsumexp_rows(x, Some(mask)), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut g = Graph::new();
            let a = g.param(random(&mut rng, 4, 5));
            let w = g.param(random(&mut rng, 5, 3));
            let h = g.matmul(a, w).unwrap();
            let h = g.relu(h);
            let l = g.logsumexp_rows(h, None).unwrap();
            let s = g.sum(l);
            g.backward(s).unwrap();
            (g.grad_or_zeros(a), g.grad_or_zeros(w))
        };
        let (a1, w1) = run();
        let (a2, w2) = run();
        assert_eq!(a1, a2);
        assert_eq!(w1, w2);
    }
}
