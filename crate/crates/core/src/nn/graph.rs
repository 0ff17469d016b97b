//! Tape-based reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape in reverse and returns the gradient of a scalar output with
//! respect to every node that needs one. Locked parameters enter the tape as
//! constants and never receive a gradient.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentSum {
        x: Var,
        weights: Vec<f64>,
        group: usize,
    },
    GroupSoftmax {
        x: Var,
        groups: Vec<(usize, usize)>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        coef: Vec<f64>,
        probs: Mat,
    },
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// `(id, grad)` for every parameter that received a gradient, by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Mat)> {
        let mut out: Vec<(ParamId, &Mat)> = self
            .params
            .iter()
            .filter_map(|(&id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn shape_err(what: &str, a: &Mat, b: &Mat) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim()))
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, mut value: Mat, op: Op, needs_grad: bool) -> Var {
        if !value.is_standard_layout() {
            value = value.as_standard_layout().into_owned();
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted.
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, !store.is_locked(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x + b` with `b` a `1 × c` row broadcast over every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(shape_err("add_row", vx, vb));
        }
        let out = vx + vb;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("add", va, vb));
        }
        let out = va + vb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("mul", va, vb));
        }
        let out = va * vb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x) * s;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    /// Per-row layer normalisation followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.ncols();
        for v in [gamma, beta] {
            let vv = self.value(v);
            if vv.dim() != (1, c) {
                return Err(shape_err("layer_norm affine", vx, vv));
            }
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = cols.iter().find(|&&c| c >= vx.ncols()) {
            return Err(Error::Shape(format!("column {bad} of {}", vx.ncols())));
        }
        let out = vx.select(Axis(1), &cols);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectCols(x, cols), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start == 0 && end == self.value(x).ncols() {
            return Ok(x);
        }
        self.select_cols(x, (start..end).collect())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(Error::Shape(format!("row {bad} of {}", vx.nrows())));
        }
        let out = vx.select(Axis(0), &rows);
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, rows), ng))
    }

    /// Weighted sum over consecutive groups of `group` rows:
    /// `out[i] = Σ_k w[i·group+k] · x[i·group+k]`.
    pub fn segment_sum(&mut self, x: Var, weights: Vec<f64>, group: usize) -> Result<Var> {
        let vx = self.value(x);
        if group == 0 || vx.nrows() % group != 0 || weights.len() != vx.nrows() {
            return Err(Error::Shape(format!(
                "segment_sum: {} rows, group {group}, {} weights",
                vx.nrows(),
                weights.len()
            )));
        }
        let n = vx.nrows() / group;
        let mut out = Mat::zeros((n, vx.ncols()));
        for (i, mut orow) in out.rows_mut().into_iter().enumerate() {
            for k in 0..group {
                let r = i * group + k;
                let w = weights[r];
                if w != 0.0 {
                    orow.scaled_add(w, &vx.row(r));
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SegmentSum { x, weights, group }, ng))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let n = self.value(x).nrows();
        self.segment_sum(x, vec![1.0 / group as f64; n], group)
    }

    /// Row-wise softmax applied independently within each `(start, len)`
    /// column group.
    pub fn group_softmax(&mut self, x: Var, groups: Vec<(usize, usize)>) -> Result<Var> {
        let vx = self.value(x);
        let covered: usize = groups.iter().map(|g| g.1).sum();
        if covered != vx.ncols() || groups.iter().any(|&(s, l)| l == 0 || s + l > vx.ncols()) {
            return Err(Error::Shape(format!(
                "group_softmax groups {groups:?} for {} columns",
                vx.ncols()
            )));
        }
        let mut out = vx.as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            for &(s, l) in &groups {
                let seg = &mut row.as_slice_mut().expect("standard layout")[s..s + l];
                softmax_in_place(seg);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GroupSoftmax { x, groups }, ng))
    }

    /// `Σ_i coef_i · (−log softmax(logits_i)[labels_i])` as a `1×1` node.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>, coef: Vec<f64>) -> Result<Var> {
        let vl = self.value(logits);
        let (n, k) = vl.dim();
        if labels.len() != n || coef.len() != n {
            return Err(Error::Shape(format!(
                "softmax_xent: {n} rows, {} labels, {} coefficients",
                labels.len(),
                coef.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} with {k} classes")));
        }
        let mut probs = vl.as_standard_layout().into_owned();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let slice = row.as_slice_mut().expect("standard layout");
            let lse = log_sum_exp(slice);
            if coef[i] != 0.0 {
                loss += coef[i] * (lse - slice[labels[i]]);
            }
            for v in slice.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                labels,
                coef,
                probs,
            },
            ng,
        ))
    }

    /// Linear combination of `1×1` nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let vv = self.value(v);
            if vv.dim() != (1, 1) {
                return Err(Error::Shape(format!("combine expects scalars, got {:?}", vv.dim())));
            }
            total += c * vv[[0, 0]];
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Mat::from_elem((1, 1), total), Op::Combine(terms.to_vec()), ng))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(x, s) => acc(*x, g * *s),
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| {
                        if v <= 0.0 {
                            *d *= slope
                        }
                    });
                acc(*x, d);
            }
            Op::Softplus(x) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| *d *= sigmoid(v));
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let c = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[i];
                        for j in 0..row.len() {
                            row[j] = is / c * (c * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SelectCols(x, cols) => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (j, &c) in cols.iter().enumerate() {
                    let mut dc = d.column_mut(c);
                    dc += &g.column(j);
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::GatherRows(x, rows) => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dr = d.row_mut(r);
                    dr += &g.row(i);
                }
                acc(*x, d);
            }
            Op::SegmentSum { x, weights, group } => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let w = weights[r];
                    if w != 0.0 {
                        row.scaled_add(w, &g.row(r / group));
                    }
                }
                acc(*x, d);
            }
            Op::GroupSoftmax { x, groups } => {
                let y = &node.value;
                let mut d = g * y;
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    for &(s, l) in groups {
                        let gy: f64 = (s..s + l).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in s..s + l {
                            row[j] -= y[[i, j]] * gy;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                coef,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut d = probs.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let c = coef[i] * scale;
                    if c == 0.0 {
                        row.fill(0.0);
                    } else {
                        row[labels[i]] -= 1.0;
                        row *= c;
                    }
                }
                acc(*logits, d);
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    acc(v, g * c);
                }
            }
        }
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}
