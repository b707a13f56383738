//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1 × 1`. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! Leaves created with `requires_grad = false` (frozen weights, inputs)
//! never receive gradients, and no gradient work is done for any node whose
//! inputs are all frozen.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::encoder::mean_kernel;
use crate::relgraph::SubgraphView;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    InjectRows {
        base: Var,
        src: Var,
        positions: Vec<usize>,
    },
    MeanAggregate(Var, Arc<SubgraphView>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    LogSoftmaxPick {
        x: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<(usize, Vec<f64>)>,
    },
    RowRescale {
        x: Var,
        target: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require gradients (or the root does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: ({ar}×{ac}) · ({br}×{bc})");
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`, the layout used for `x · Wᵀ` with `W` stored as `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "matmul_t: ({ar}×{ac}) · ({br}×{bc})ᵀ");
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + 1·row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(elu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Elu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start, end), ng)
    }

    /// Row lookup; used for embedding tables and node selection.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let ng = self.ng(&[a]);
        self.push(value, Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// Copy of `base` with row `positions[j]` replaced by row `j` of `src`.
    pub fn inject_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Var {
        let mut value = self.value(base).clone();
        {
            let src_value = self.value(src);
            assert_eq!(src_value.nrows(), positions.len(), "inject_rows");
            for (j, &p) in positions.iter().enumerate() {
                value.row_mut(p).assign(&src_value.row(j));
            }
        }
        let ng = self.ng(&[base, src]);
        self.push(
            value,
            Op::InjectRows {
                base,
                src,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    /// Full-batch neighborhood mean over `view`.
    pub fn mean_aggregate(&mut self, states: Var, view: &Arc<SubgraphView>) -> Var {
        let value = mean_kernel(view.neighbor_lists(), self.value(states));
        let ng = self.ng(&[states]);
        self.push(value, Op::MeanAggregate(states, Arc::clone(view)), ng)
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row softmax where row `i` may only see columns `0..=i + offset`.
    pub fn causal_softmax(&mut self, scores: Var, offset: usize) -> Var {
        let sv = self.value(scores);
        let (rows, cols) = sv.dim();
        let mut value = Array2::zeros((rows, cols));
        for i in 0..rows {
            let visible = (i + offset + 1).min(cols);
            let row = sv.row(i);
            let max = row.iter().take(visible).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for j in 0..visible {
                let e = (row[j] - max).exp();
                value[[i, j]] = e;
                total += e;
            }
            for j in 0..visible {
                value[[i, j]] /= total;
            }
        }
        let ng = self.ng(&[scores]);
        self.push(value, Op::CausalSoftmax(scores), ng)
    }

    /// `Σ_k log softmax(x[r_k, :])[c_k]` as a `1 × 1` value.
    pub fn log_softmax_pick(&mut self, x: Var, picks: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let mut total = 0.0;
        let mut probs: Vec<(usize, Vec<f64>)> = Vec::new();
        for &(r, c) in picks {
            let row = xv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += row[c] - lse;
            if !probs.iter().any(|(pr, _)| *pr == r) {
                probs.push((r, row.iter().map(|v| (v - lse).exp()).collect()));
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::LogSoftmaxPick {
                x,
                picks: picks.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Rescales every row to Euclidean norm `target` (zero rows pass through).
    pub fn row_rescale(&mut self, x: Var, target: f64) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            if n > 0.0 {
                row *= target / n;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::RowRescale { x, target, norms }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Elu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi *= xi.exp();
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |gi, &xi| *gi *= gelu_grad(xi));
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.wants(*a) {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start, end) => {
                if self.wants(*a) {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*end, ..]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::GatherRows(a, rows) => {
                if self.wants(*a) {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::InjectRows { base, src, positions } => {
                if self.wants(*base) {
                    let mut d = g.clone();
                    for &p in positions {
                        d.row_mut(p).fill(0.0);
                    }
                    self.accumulate(grads, *base, d);
                }
                if self.wants(*src) {
                    self.accumulate(grads, *src, g.select(Axis(0), positions));
                }
            }
            Op::MeanAggregate(states, view) => {
                if self.wants(*states) {
                    let mut d = Array2::zeros(self.shape(*states));
                    for (v, nbrs) in view.neighbor_lists().iter().enumerate() {
                        if nbrs.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / nbrs.len() as f64;
                        let gv = g.row(v);
                        for &u in nbrs {
                            d.row_mut(u).scaled_add(inv, &gv);
                        }
                    }
                    self.accumulate(grads, *states, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain);
                    let dxhat = g * gain_v;
                    let cols = xhat.ncols() as f64;
                    let mut d = Array2::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        let k = inv_std[i] / cols;
                        for j in 0..xhat.ncols() {
                            d[[i, j]] = k * (cols * dr[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::CausalSoftmax(scores) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.outer_iter_mut().zip(y.outer_iter()) {
                    let dot: f64 = drow.sum();
                    drow.scaled_add(-dot, &yrow);
                }
                self.accumulate(grads, *scores, d);
            }
            Op::LogSoftmaxPick { x, picks, probs } => {
                let gs = g[[0, 0]];
                let mut d = Array2::zeros(self.shape(*x));
                for &(r, c) in picks {
                    let p = &probs.iter().find(|(pr, _)| *pr == r).expect("cached row").1;
                    for (j, pj) in p.iter().enumerate() {
                        d[[r, j]] -= gs * pj;
                    }
                    d[[r, c]] += gs;
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowRescale { x, target, norms } => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let n = norms[i];
                    if n == 0.0 {
                        d.row_mut(i).assign(&g.row(i));
                        continue;
                    }
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let proj = gr.dot(&xr) / (n * n);
                    for j in 0..xv.ncols() {
                        d[[i, j]] = target / n * (gr[j] - proj * xr[j]);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                self.accumulate(grads, *a, Array2::from_elem(self.shape(*a), k));
            }
        }
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
