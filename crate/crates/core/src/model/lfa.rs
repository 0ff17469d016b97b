//! Local feature aggregation over the K nearest neighbours, plain (LFA) and
//! existential (ELFA), with density assignments preserved.

use crate::error::Result;
use crate::model::input::{LevelInput, REL_DIM};
use crate::nn::{Allocation, DensityAttention, DensityMlp, Graph, Layout, Mlp, ParamBuilder, ParamStore, Var};

/// Layout of a neighbourhood feature: the position encoding joins the last
/// subsection, so every density sees the coordinates.
pub fn with_positions(layout: &Layout, pos_width: usize) -> Layout {
    let mut widths = layout.widths.clone();
    *widths.last_mut().expect("non-empty layout") += pos_width;
    Layout { widths }
}

/// Interleaves two same-layout blocks subsection by subsection.
pub fn interleave_columns(layout: &Layout) -> Vec<usize> {
    let t = layout.total();
    let mut cols = Vec::with_capacity(2 * t);
    for r in (0..layout.count()).map(|d| layout.range(d)) {
        cols.extend(r.clone());
        cols.extend(r.map(|c| c + t));
    }
    cols
}

pub fn doubled(layout: &Layout) -> Layout {
    Layout {
        widths: layout.widths.iter().map(|w| 2 * w).collect(),
    }
}

/// Gathered neighbour features with the position encoding appended.
fn neighbourhood(
    g: &mut Graph,
    store: &ParamStore,
    pos: &Mlp,
    x: Var,
    level: &LevelInput,
) -> Result<Var> {
    let rel = g.input(level.rel.clone());
    let pe = pos.forward(g, store, rel)?;
    let nf = g.gather_rows(x, level.neighbors.clone())?;
    g.concat_cols(&[nf, pe])
}

#[derive(Debug, Clone)]
pub struct Lfa {
    pub pos: Mlp,
    pub att: DensityAttention,
    pub mix: DensityMlp,
    pub layout: Layout,
}

impl Lfa {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layout: &Layout,
        pos_width: usize,
        alloc: Allocation,
    ) -> Result<Lfa> {
        let lc = with_positions(layout, pos_width);
        Ok(Lfa {
            pos: Mlp::new(pb, &format!("{name}.pos"), REL_DIM, pos_width),
            att: DensityAttention::new(pb, &format!("{name}.att"), &lc, alloc)?,
            mix: DensityMlp::new(pb, &format!("{name}.mix"), &lc, &layout.widths, alloc)?,
            layout: layout.clone(),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, level: &LevelInput) -> Result<Var> {
        let nf = neighbourhood(g, store, &self.pos, x, level)?;
        let gated = self.att.forward(g, store, nf)?;
        let pooled = g.group_mean(gated, level.k)?;
        self.mix.forward(g, store, pooled)
    }
}

#[derive(Debug, Clone)]
pub struct Elfa {
    pub pos: Mlp,
    pub att_original: DensityAttention,
    pub mix_original: DensityMlp,
    pub att: DensityAttention,
    pub mix: DensityMlp,
    pub layout: Layout,
}

/// Mean-pooling weights over the neighbours whose inherent state is at most
/// `current_d`; rows with no surviving neighbour get all-zero weights.
pub fn existence_weights(level: &LevelInput, current_d: u8) -> Vec<f64> {
    let k = level.k;
    let mut w = vec![0.0; level.n * k];
    for i in 0..level.n {
        let row = &level.neighbors[i * k..(i + 1) * k];
        let alive = row.iter().filter(|&&j| level.states[j] <= current_d).count();
        if alive == 0 {
            continue;
        }
        for (s, &j) in row.iter().enumerate() {
            if level.states[j] <= current_d {
                w[i * k + s] = 1.0 / alive as f64;
            }
        }
    }
    w
}

impl Elfa {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layout: &Layout,
        pos_width: usize,
        alloc: Allocation,
    ) -> Result<Elfa> {
        let lc = with_positions(layout, pos_width);
        let lf = doubled(&lc);
        Ok(Elfa {
            pos: Mlp::new(pb, &format!("{name}.pos"), REL_DIM, pos_width),
            att_original: DensityAttention::new(pb, &format!("{name}.att_orig"), &lc, alloc)?,
            mix_original: DensityMlp::new(pb, &format!("{name}.mix_orig"), &lc, &lc.widths, alloc)?,
            att: DensityAttention::new(pb, &format!("{name}.att"), &lf, alloc)?,
            mix: DensityMlp::new(pb, &format!("{name}.mix"), &lf, &layout.widths, alloc)?,
            layout: layout.clone(),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        level: &LevelInput,
        current_d: u8,
    ) -> Result<Var> {
        let nf = neighbourhood(g, store, &self.pos, x, level)?;
        let weights = existence_weights(level, current_d);
        let exists = g.segment_sum(nf, weights, level.k)?;
        let original = self.att_original.forward(g, store, nf)?;
        let original = g.group_mean(original, level.k)?;
        let original = self.mix_original.forward(g, store, original)?;
        let both = g.concat_cols(&[original, exists])?;
        let lc = &self.mix_original.layout_out;
        let f = g.select_cols(both, interleave_columns(lc))?;
        let f = self.att.forward(g, store, f)?;
        self.mix.forward(g, store, f)
    }
}

#[derive(Debug, Clone)]
pub enum Aggregator {
    Lfa(Lfa),
    Elfa(Elfa),
}

impl Aggregator {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layout: &Layout,
        pos_width: usize,
        alloc: Allocation,
        existential: bool,
    ) -> Result<Aggregator> {
        Ok(if existential {
            Aggregator::Elfa(Elfa::new(pb, name, layout, pos_width, alloc)?)
        } else {
            Aggregator::Lfa(Lfa::new(pb, name, layout, pos_width, alloc)?)
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        level: &LevelInput,
        current_d: u8,
    ) -> Result<Var> {
        match self {
            Aggregator::Lfa(l) => l.forward(g, store, x, level),
            Aggregator::Elfa(e) => e.forward(g, store, x, level, current_d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_order() {
        let l = Layout::new(vec![1, 2]).unwrap();
        assert_eq!(interleave_columns(&l), vec![0, 3, 1, 2, 4, 5]);
        assert_eq!(doubled(&l).widths, vec![2, 4]);
        assert_eq!(with_positions(&l, 3).widths, vec![1, 5]);
    }
}
