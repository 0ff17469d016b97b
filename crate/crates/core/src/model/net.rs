//! Encoder blocks, decoder, training classifiers `g_1..g_4` and the gated
//! final classifier, wired over the five pyramid levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::HdvConfig;
use crate::model::input::{LevelInput, NetInput};
use crate::model::lfa::Aggregator;
use crate::nn::{
    Allocation, DensityConnected, DensityMlp, Graph, Layout, Linear, Mlp, ParamBuilder, ParamStore, Var,
};
use crate::subsample::LEVELS;

/// Number of training classifiers.
pub const HEADS: usize = 4;

/// Prefix of every parameter that belongs to `g_final`.
pub const FINAL_PREFIX: &str = "final.";

pub fn is_final_param(name: &str) -> bool {
    name.starts_with(FINAL_PREFIX)
}

/// Density-assigned encoder block `DB_a`.
#[derive(Debug, Clone)]
pub struct DbBlock {
    pub a: usize,
    pub embed: Mlp,
    pub reduce: DensityMlp,
    pub lfa: [Aggregator; 2],
    pub expand: DensityMlp,
    pub layout_in: Layout,
    pub layout_out: Layout,
}

impl DbBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &HdvConfig, a: usize) -> Result<DbBlock> {
        let alloc = cfg.allocation();
        let name = format!("enc{a}");
        let le = cfg.layout_e(a);
        let lh = cfg.layout_h(a);
        let agg = |pb: &mut ParamBuilder, i: usize| {
            Aggregator::new(pb, &format!("{name}.lfa{i}"), &lh, cfg.pos_width, alloc, cfg.use_elfa)
        };
        Ok(DbBlock {
            a,
            embed: Mlp::new(pb, &format!("{name}.embed"), cfg.raw_dim(), cfg.e[a - 1]),
            reduce: DensityMlp::new(pb, &format!("{name}.reduce"), &le, &lh.widths, alloc)?,
            lfa: [agg(pb, 1)?, agg(pb, 2)?],
            expand: DensityMlp::new(pb, &format!("{name}.expand"), &lh, &le.widths, alloc)?,
            layout_in: if a == 1 { Layout { widths: vec![] } } else { cfg.layout_e(a - 1) },
            layout_out: le,
        })
    }

    /// `prev` holds `F^(a-1)` already gathered onto this level's points.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: Option<Var>,
        level: &LevelInput,
    ) -> Result<Var> {
        let raw = g.input(level.raw.clone());
        let emb = self.embed.forward(g, store, raw)?;
        let x = match prev {
            None if self.a == 1 => emb,
            Some(p) if self.a > 1 => {
                let c = g.value(p).ncols();
                if c != self.layout_in.total() {
                    return Err(Error::Assignment(format!(
                        "DB_{} expects {} input features, got {c}",
                        self.a,
                        self.layout_in.total()
                    )));
                }
                g.concat_cols(&[p, emb])?
            }
            _ => {
                return Err(Error::Assignment(format!(
                    "DB_{} needs {} subsections of input",
                    self.a,
                    self.a - 1
                )))
            }
        };
        let hidden = self.reduce.forward(g, store, x)?;
        let d = self.a as u8;
        let y = self.lfa[0].forward(g, store, hidden, level, d)?;
        let y = self.lfa[1].forward(g, store, y, level, d)?;
        let y = g.add(y, hidden)?;
        self.expand.forward(g, store, y)
    }
}

/// Column order placing coarse and skip subsections side by side; coarse
/// subsections beyond the skip layout follow at the end.
pub fn merge_columns(coarse: &Layout, skip: &Layout) -> (Vec<usize>, Layout) {
    let tc = coarse.total();
    let mut cols = Vec::new();
    let mut widths = Vec::new();
    for d in 0..coarse.count().max(skip.count()) {
        let mut w = 0;
        if d < coarse.count() {
            cols.extend(coarse.range(d));
            w += coarse.widths[d];
        }
        if d < skip.count() {
            cols.extend(skip.range(d).map(|c| c + tc));
            w += skip.widths[d];
        }
        widths.push(w);
    }
    (cols, Layout { widths })
}

/// Decoder step onto level `a`: nearest-point copy from level `a+1`, merge
/// with the encoder skip, DMLP back to the level-`a` layout.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub a: usize,
    pub cols: Vec<usize>,
    pub merge: DensityMlp,
}

impl UpBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &HdvConfig, a: usize) -> Result<UpBlock> {
        let (cols, merged) = merge_columns(&cfg.layout_e(a + 1), &cfg.layout_e(a));
        Ok(UpBlock {
            a,
            cols,
            merge: DensityMlp::new(
                pb,
                &format!("dec{a}.merge"),
                &merged,
                &cfg.layout_e(a).widths,
                cfg.allocation(),
            )?,
        })
    }

    /// `up_map` gives, for each level-`a` point, its nearest level-`a+1` point.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coarse: Var,
        up_map: &[usize],
        skip: Var,
    ) -> Result<Var> {
        if up_map.len() != g.value(skip).nrows() {
            return Err(Error::Contract(format!(
                "up-map covers {} points, level has {}",
                up_map.len(),
                g.value(skip).nrows()
            )));
        }
        let copied = g.gather_rows(coarse, up_map.to_vec())?;
        let both = g.concat_cols(&[copied, skip])?;
        let merged = g.select_cols(both, self.cols.clone())?;
        self.merge.forward(g, store, merged)
    }
}

/// Training classifier `g_a`: DMLP to the hidden layout, then a DC whose
/// single output block maps every subsection to the class logits.
#[derive(Debug, Clone)]
pub struct TrainHead {
    pub a: usize,
    pub dmlp: DensityMlp,
    pub dc: DensityConnected,
}

impl TrainHead {
    pub fn new(pb: &mut ParamBuilder, cfg: &HdvConfig, a: usize) -> Result<TrainHead> {
        let lh = cfg.layout_h(a);
        Ok(TrainHead {
            a,
            dmlp: DensityMlp::new(pb, &format!("head{a}.dmlp"), &cfg.layout_e(a), &lh.widths, cfg.allocation())?,
            dc: DensityConnected::new(pb, &format!("head{a}.dc"), &lh, &[cfg.class_count], Allocation::Assigned)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let h = self.dmlp.forward(g, store, f)?;
        self.dc.forward(g, store, h)
    }
}

/// `g_final`: per-group softplus gates from `(B^1, B^2, B^3, log ρ)` scale the
/// decoder features of levels 1..4 copied up to level 1.
#[derive(Debug, Clone)]
pub struct FinalClassifier {
    pub gate_mlp: Mlp,
    pub gate_fc: Linear,
    pub mlp: Mlp,
    pub out: Linear,
    pub widths: Vec<usize>,
}

impl FinalClassifier {
    pub fn new(pb: &mut ParamBuilder, cfg: &HdvConfig) -> FinalClassifier {
        let widths: Vec<usize> = (1..=HEADS).map(|a| cfg.t(a)).collect();
        let total: usize = widths.iter().sum();
        FinalClassifier {
            gate_mlp: Mlp::new(pb, "final.gate.mlp", 4, cfg.gate_hidden),
            gate_fc: Linear::new(pb, "final.gate.fc", cfg.gate_hidden, HEADS),
            mlp: Mlp::new(pb, "final.mlp", total, cfg.final_hidden),
            out: Linear::new(pb, "final.out", cfg.final_hidden, cfg.class_count),
            widths,
        }
    }

    pub fn gates(&self, g: &mut Graph, store: &ParamStore, gate_input: Var) -> Result<Var> {
        let h = self.gate_mlp.forward(g, store, gate_input)?;
        let z = self.gate_fc.forward(g, store, h)?;
        Ok(g.softplus(z))
    }

    /// `features[a]` is the decoder output of level `a+1` already copied to
    /// level-1 rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[Var], gate_input: Var) -> Result<Var> {
        if features.len() != HEADS {
            return Err(Error::Shape(format!("g_final needs {HEADS} feature groups")));
        }
        let alpha = self.gates(g, store, gate_input)?;
        let mut gated = Vec::with_capacity(HEADS);
        for (a, &f) in features.iter().enumerate() {
            let w = g.value(f).ncols();
            let gate = g.select_cols(alpha, vec![a; w])?;
            gated.push(g.mul(f, gate)?);
        }
        let all = g.concat_cols(&gated)?;
        let h = self.mlp.forward(g, store, all)?;
        self.out.forward(g, store, h)
    }
}

/// Which outputs a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outputs {
    Heads,
    Final,
    Both,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Encoder outputs `F^(1..5)`, each on its own level.
    pub encoder: Vec<Var>,
    /// Decoder outputs on levels 1..4.
    pub decoder: Vec<Var>,
    /// Logits of `g_1..g_4` on levels 1..4.
    pub head_logits: Vec<Var>,
    /// `N_1 × k` logits of `g_final`.
    pub final_logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct HdvNet {
    pub cfg: HdvConfig,
    pub encoder: Vec<DbBlock>,
    /// `decoder[a-1]` produces level `a`.
    pub decoder: Vec<UpBlock>,
    pub heads: Vec<TrainHead>,
    pub final_head: FinalClassifier,
}

impl HdvNet {
    /// Builds the architecture and a freshly initialised parameter store.
    pub fn new(cfg: &HdvConfig, seed: u64) -> Result<(HdvNet, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let encoder = (1..=LEVELS)
            .map(|a| DbBlock::new(&mut pb, cfg, a))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (1..LEVELS)
            .map(|a| UpBlock::new(&mut pb, cfg, a))
            .collect::<Result<Vec<_>>>()?;
        let heads = (1..=HEADS)
            .map(|a| TrainHead::new(&mut pb, cfg, a))
            .collect::<Result<Vec<_>>>()?;
        let final_head = FinalClassifier::new(&mut pb, cfg);
        Ok((
            HdvNet {
                cfg: cfg.clone(),
                encoder,
                decoder,
                heads,
                final_head,
            },
            store,
        ))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &NetInput) -> Result<Vec<Var>> {
        check_levels(input)?;
        let mut out: Vec<Var> = Vec::with_capacity(LEVELS);
        for (a, block) in self.encoder.iter().enumerate() {
            let level = &input.levels[a];
            let prev = match out.last() {
                Some(&f) => Some(g.gather_rows(f, level.down.clone())?),
                None => None,
            };
            out.push(block.forward(g, store, prev, level)?);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &NetInput, outputs: Outputs) -> Result<Forward> {
        let encoder = self.encode(g, store, input)?;
        let mut decoder = vec![encoder[LEVELS - 1]; LEVELS - 1];
        let mut coarse = encoder[LEVELS - 1];
        for a in (1..LEVELS).rev() {
            let up = &self.decoder[a - 1];
            coarse = up.forward(g, store, coarse, &input.levels[a].up_map, encoder[a - 1])?;
            decoder[a - 1] = coarse;
        }
        let mut head_logits = Vec::new();
        if outputs != Outputs::Final {
            for (a, head) in self.heads.iter().enumerate() {
                head_logits.push(head.forward(g, store, decoder[a])?);
            }
        }
        let final_logits = if outputs != Outputs::Heads {
            let mut up = Vec::with_capacity(HEADS);
            for a in 0..HEADS {
                up.push(if a == 0 {
                    decoder[0]
                } else {
                    g.gather_rows(decoder[a], input.to_level[a].clone())?
                });
            }
            let gi = g.input(input.gate_input.clone());
            Some(self.final_head.forward(g, store, &up, gi)?)
        } else {
            None
        };
        Ok(Forward {
            encoder,
            decoder,
            head_logits,
            final_logits,
        })
    }
}

fn check_levels(input: &NetInput) -> Result<()> {
    if input.levels.len() != LEVELS {
        return Err(Error::Shape(format!("{} pyramid levels, need {LEVELS}", input.levels.len())));
    }
    Ok(())
}

/// Layer-by-layer shape of one encoder block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub level: usize,
    pub points: usize,
    /// Raw point values plus `T_{a-1}`.
    pub input: usize,
    /// `U_a`.
    pub hidden: usize,
    /// `T_a`.
    pub output: usize,
}

/// Shapes the encoder blocks of `cfg` produce, from the built network.
pub fn shape_trace(net: &HdvNet) -> Vec<BlockShape> {
    net.encoder
        .iter()
        .map(|b| BlockShape {
            level: b.a,
            points: net.cfg.counts[b.a - 1],
            input: b.embed.fc.fan_in + b.layout_in.total(),
            hidden: b.reduce.layout_out.total(),
            output: b.expand.layout_out.total(),
        })
        .collect()
}

/// Scalar parameter count of the network built from `cfg`.
pub fn parameter_count(cfg: &HdvConfig) -> Result<usize> {
    Ok(HdvNet::new(cfg, 0)?.1.scalar_count())
}
