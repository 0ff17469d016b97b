//! Layer primitives: FC, MLP (FC → LN → leaky ReLU), the block-masked DC and
//! DMLP layers, attention gating and the masked class-weighted cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Mat, Var};
use crate::nn::params::{ParamBuilder, ParamId, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LN_EPS: f64 = 1e-6;

/// Subsection widths of a feature vector. Subsection `d` (0-based here) holds
/// the features assigned to density state `d + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub widths: Vec<usize>,
}

impl Layout {
    pub fn new(widths: Vec<usize>) -> Result<Layout> {
        if widths.contains(&0) {
            return Err(Error::Assignment(format!("zero-width subsection in {widths:?}")));
        }
        Ok(Layout { widths })
    }

    pub fn single(width: usize) -> Layout {
        Layout {
            widths: vec![width],
        }
    }

    /// Number of subsections.
    pub fn count(&self) -> usize {
        self.widths.len()
    }

    pub fn total(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn offset(&self, d: usize) -> usize {
        self.widths[..d].iter().sum()
    }

    pub fn range(&self, d: usize) -> std::ops::Range<usize> {
        let o = self.offset(d);
        o..o + self.widths[d]
    }

    /// `(start, len)` per subsection.
    pub fn groups(&self) -> Vec<(usize, usize)> {
        (0..self.count()).map(|d| (self.offset(d), self.widths[d])).collect()
    }

    pub fn prefix(&self, a: usize) -> Layout {
        Layout {
            widths: self.widths[..a].to_vec(),
        }
    }

    pub fn with(&self, width: usize) -> Layout {
        let mut widths = self.widths.clone();
        widths.push(width);
        Layout { widths }
    }
}

/// Whether DC/DMLP blocks honour the subsection assignment or read every input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Allocation {
    Assigned,
    Dense,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = pb.uniform(&format!("{name}.w"), fan_in, fan_out, fan_in);
        let b = pb.uniform(&format!("{name}.b"), 1, fan_out, fan_in);
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// `AVN(LN(FC(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc: Linear,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Mlp {
        let fc = Linear::new(pb, &format!("{name}.fc"), fan_in, fan_out);
        let gamma = pb.constant(&format!("{name}.ln.gamma"), 1, fan_out, 1.0);
        let beta = pb.constant(&format!("{name}.ln.beta"), 1, fan_out, 0.0);
        Mlp { fc, gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.fc.forward(g, store, x)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.layer_norm(y, gamma, beta, LN_EPS)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

fn block_inputs(
    layout_in: &Layout,
    out_widths: &[usize],
    alloc: Allocation,
) -> Result<Vec<std::ops::Range<usize>>> {
    if out_widths.len() > layout_in.count() {
        return Err(Error::Assignment(format!(
            "{} output subsections from {} input subsections",
            out_widths.len(),
            layout_in.count()
        )));
    }
    if out_widths.contains(&0) {
        return Err(Error::Assignment(format!("zero-width output in {out_widths:?}")));
    }
    let total = layout_in.total();
    Ok((0..out_widths.len())
        .map(|d| match alloc {
            Allocation::Assigned => layout_in.offset(d)..total,
            Allocation::Dense => 0..total,
        })
        .collect())
}

/// Density-connected layer: output subsection `d` is an FC over input
/// subsections `d..a_in`.
#[derive(Debug, Clone)]
pub struct DensityConnected {
    pub blocks: Vec<Linear>,
    pub inputs: Vec<std::ops::Range<usize>>,
    pub layout_in: Layout,
    pub layout_out: Layout,
}

impl DensityConnected {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layout_in: &Layout,
        out_widths: &[usize],
        alloc: Allocation,
    ) -> Result<DensityConnected> {
        let inputs = block_inputs(layout_in, out_widths, alloc)?;
        let blocks = inputs
            .iter()
            .zip(out_widths)
            .enumerate()
            .map(|(d, (r, &w))| Linear::new(pb, &format!("{name}.{d}"), r.len(), w))
            .collect();
        Ok(DensityConnected {
            blocks,
            inputs,
            layout_in: layout_in.clone(),
            layout_out: Layout::new(out_widths.to_vec())?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(g, x, &self.layout_in)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (block, r) in self.blocks.iter().zip(&self.inputs) {
            let xi = g.slice_cols(x, r.start, r.end)?;
            outs.push(block.forward(g, store, xi)?);
        }
        g.concat_cols(&outs)
    }

    /// The implied full weight matrix (`T_in × T_out`, zeros outside the
    /// assigned blocks) and bias.
    pub fn dense_equivalent(&self, store: &ParamStore) -> (Mat, Mat) {
        let t_in = self.layout_in.total();
        let t_out = self.layout_out.total();
        let mut w = Mat::zeros((t_in, t_out));
        let mut b = Mat::zeros((1, t_out));
        for (d, (block, r)) in self.blocks.iter().zip(&self.inputs).enumerate() {
            let oc = self.layout_out.range(d);
            w.slice_mut(ndarray::s![r.clone(), oc.clone()])
                .assign(store.value(block.w));
            b.slice_mut(ndarray::s![.., oc]).assign(store.value(block.b));
        }
        (w, b)
    }
}

/// Density-assigned MLP: an independent `AVN(LN(FC))` per output subsection.
#[derive(Debug, Clone)]
pub struct DensityMlp {
    pub blocks: Vec<Mlp>,
    pub inputs: Vec<std::ops::Range<usize>>,
    pub layout_in: Layout,
    pub layout_out: Layout,
}

impl DensityMlp {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layout_in: &Layout,
        out_widths: &[usize],
        alloc: Allocation,
    ) -> Result<DensityMlp> {
        let inputs = block_inputs(layout_in, out_widths, alloc)?;
        let blocks = inputs
            .iter()
            .zip(out_widths)
            .enumerate()
            .map(|(d, (r, &w))| Mlp::new(pb, &format!("{name}.{d}"), r.len(), w))
            .collect();
        Ok(DensityMlp {
            blocks,
            inputs,
            layout_in: layout_in.clone(),
            layout_out: Layout::new(out_widths.to_vec())?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(g, x, &self.layout_in)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (block, r) in self.blocks.iter().zip(&self.inputs) {
            let xi = g.slice_cols(x, r.start, r.end)?;
            outs.push(block.forward(g, store, xi)?);
        }
        g.concat_cols(&outs)
    }
}

fn check_width(g: &Graph, x: Var, layout: &Layout) -> Result<()> {
    let c = g.value(x).ncols();
    if c != layout.total() {
        return Err(Error::Shape(format!(
            "input has {c} columns, layout {:?} needs {}",
            layout.widths,
            layout.total()
        )));
    }
    Ok(())
}

/// `x ⊙ softmax(FC(x))` with the softmax over the whole feature axis.
#[derive(Debug, Clone)]
pub struct AttentionScore {
    pub fc: Linear,
}

impl AttentionScore {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize) -> AttentionScore {
        AttentionScore {
            fc: Linear::new(pb, name, width, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.fc.forward(g, store, x)?;
        let t = g.value(logits).ncols();
        let s = g.group_softmax(logits, vec![(0, t)])?;
        g.mul(x, s)
    }
}

/// Attention gate that keeps the subsection assignment: logits come from a DC
/// layer and the softmax runs within each subsection.
#[derive(Debug, Clone)]
pub struct DensityAttention {
    pub dc: DensityConnected,
}

impl DensityAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layout: &Layout,
        alloc: Allocation,
    ) -> Result<DensityAttention> {
        Ok(DensityAttention {
            dc: DensityConnected::new(pb, name, layout, &layout.widths, alloc)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.dc.forward(g, store, x)?;
        let s = g.group_softmax(logits, self.dc.layout_out.groups())?;
        g.mul(x, s)
    }
}

/// Mean over masked points of `weight[label] · (−log softmax(logits)[label])`.
/// An empty mask yields a zero loss with zero gradient.
pub fn softmax_xent(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    class_weights: &[f64],
    mask: &[bool],
) -> Result<Var> {
    let k = g.value(logits).ncols();
    if class_weights.len() != k {
        return Err(Error::Shape(format!(
            "{} class weights for {k} classes",
            class_weights.len()
        )));
    }
    if mask.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} mask entries for {} labels",
            mask.len(),
            labels.len()
        )));
    }
    let m = mask.iter().filter(|&&b| b).count();
    let coef = labels
        .iter()
        .zip(mask)
        .map(|(&l, &on)| {
            if on {
                class_weights.get(l).copied().unwrap_or(0.0) / m as f64
            } else {
                0.0
            }
        })
        .collect();
    g.softmax_xent(logits, labels.to_vec(), coef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layout_arithmetic() {
        let l = Layout::new(vec![2, 3, 5]).unwrap();
        assert_eq!(l.total(), 10);
        assert_eq!(l.range(1), 2..5);
        assert_eq!(l.groups(), vec![(0, 2), (2, 3), (5, 5)]);
        assert!(matches!(Layout::new(vec![1, 0]), Err(Error::Assignment(_))));
    }

    #[test]
    fn fc_identity_and_bias() {
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut ParamBuilder::new(&mut store, 1), "fc", 3, 3);
        *store.value_mut(fc.w) = Mat::eye(3);
        store.value_mut(fc.b).fill(0.0);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]];
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = fc.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);

        store.value_mut(fc.w).fill(0.0);
        *store.value_mut(fc.b) = array![[7.0, 8.0, 9.0]];
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = fc.forward(&mut g, &store, xv).unwrap();
        for row in g.value(y).rows() {
            assert_eq!(row.to_vec(), vec![7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn dc_rejects_growing_assignment() {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, 1);
        let l = Layout::new(vec![2, 3]).unwrap();
        assert!(matches!(
            DensityConnected::new(&mut pb, "dc", &l, &[1, 1, 1], Allocation::Assigned),
            Err(Error::Assignment(_))
        ));
    }

    #[test]
    fn uniform_xent_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.input(Mat::zeros((4, 3)));
        let loss = softmax_xent(&mut g, logits, &[0, 1, 2, 1], &[1.0; 3], &[true; 4]).unwrap();
        assert!((g.value(loss)[[0, 0]] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_xent_vanishes() {
        let mut g = Graph::new();
        let logits = g.input(array![[60.0, 0.0], [0.0, 60.0]]);
        let loss = softmax_xent(&mut g, logits, &[0, 1], &[1.0; 2], &[true; 2]).unwrap();
        assert!(g.value(loss)[[0, 0]] < 1e-20);
    }

    #[test]
    fn empty_mask_gives_zero_loss_and_gradient() {
        let mut g = Graph::new();
        let logits = g.leaf(array![[1.0, 2.0], [3.0, -1.0]], true);
        let loss = softmax_xent(&mut g, logits, &[0, 1], &[1.0; 2], &[false; 2]).unwrap();
        assert_eq!(g.value(loss)[[0, 0]], 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(logits).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_uniform_scores_scale_by_one_over_t() {
        let mut store = ParamStore::new();
        let att = AttentionScore::new(&mut ParamBuilder::new(&mut store, 2), "att", 4);
        store.value_mut(att.fc.w).fill(0.0);
        store.value_mut(att.fc.b).fill(0.3);
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = att.forward(&mut g, &store, xv).unwrap();
        for (a, b) in g.value(y).iter().zip(x.iter()) {
            assert!((a - b / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_dominant_logit_selects_one_feature() {
        let mut store = ParamStore::new();
        let att = AttentionScore::new(&mut ParamBuilder::new(&mut store, 2), "att", 3);
        store.value_mut(att.fc.w).fill(0.0);
        *store.value_mut(att.fc.b) = array![[0.0, 200.0, 0.0]];
        let mut g = Graph::new();
        let xv = g.input(array![[5.0, 6.0, 7.0]]);
        let y = att.forward(&mut g, &store, xv).unwrap();
        let v = g.value(y);
        assert!(v[[0, 0]].abs() < 1e-80 && (v[[0, 1]] - 6.0).abs() < 1e-12 && v[[0, 2]].abs() < 1e-80);
    }

    #[test]
    fn constant_row_layer_norm_is_finite_and_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut ParamBuilder::new(&mut store, 3), "m", 2, 3);
        store.value_mut(mlp.fc.w).fill(0.0);
        store.value_mut(mlp.fc.b).fill(5.0);
        let mut g = Graph::new();
        let xv = g.input(array![[1.0, 2.0]]);
        let y = mlp.forward(&mut g, &store, xv).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }
}
