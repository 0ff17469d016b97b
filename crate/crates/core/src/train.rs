//! Two-stage optimisation: the backbone with the four state-masked training
//! classifiers, then `g_final` on top of the locked backbone.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::input::sphere_members;
use crate::model::{build_input, is_final_param, HdvNet, NetInput, Outputs, Scene, HEADS};
use crate::nn::{softmax_xent, Adam, AdamConfig, Graph, Mat, ParamId, ParamStore, Var};
use crate::spatial::SpatialIndex;

/// Loss coefficient `d²` of classifier `g_d`.
pub const LOSS_COEFFS: [f64; HEADS] = [1.0, 4.0, 9.0, 16.0];

/// Points whose inherent state, with `I^(5)` folded into `I^(4)`, is at most `a`.
pub fn state_mask(states: &[u8], a: usize) -> Vec<bool> {
    states.iter().map(|&s| (s.min(4) as usize) <= a).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    None,
    InverseFrequency,
}

/// Per-class weights normalised to mean 1.
pub fn class_weights(labels: &[usize], k: usize, mode: ClassWeightMode) -> Result<Vec<f64>> {
    if mode == ClassWeightMode::None {
        return Ok(vec![1.0; k]);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Validation(format!("label {l} outside 0..{k}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::AbsentClass(c));
    }
    let n = labels.len() as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| n / c as f64).collect();
    let mean = raw.iter().sum::<f64>() / k as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l: [f64; HEADS],
    pub total: f64,
    pub counts: [usize; HEADS],
}

/// `L_total = Σ d²·L_d` over the four classifiers as a graph node.
pub fn combined_loss(
    g: &mut Graph,
    logits: &[Var],
    labels: &[&[usize]],
    masks: &[Vec<bool>],
    class_weights: &[f64],
) -> Result<(Var, LossReport)> {
    if logits.len() != HEADS || labels.len() != HEADS || masks.len() != HEADS {
        return Err(Error::Contract(format!("combined loss needs {HEADS} logit sets")));
    }
    let mut counts = [0usize; HEADS];
    for (d, m) in masks.iter().enumerate() {
        counts[d] = m.iter().filter(|&&b| b).count();
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::ZeroSupervision);
    }
    let mut terms = Vec::with_capacity(HEADS);
    let mut l = [0.0; HEADS];
    for d in 0..HEADS {
        let v = softmax_xent(g, logits[d], labels[d], class_weights, &masks[d])?;
        l[d] = g.value(v)[[0, 0]];
        terms.push((v, LOSS_COEFFS[d]));
    }
    let total = g.combine(&terms)?;
    let report = LossReport {
        l,
        total: g.value(total)[[0, 0]],
        counts,
    };
    Ok((total, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone and `g_1..g_4` with `L_total`; `g_final` locked.
    Backbone,
    /// `g_final` only, everything else locked.
    Finetune,
    /// The whole network trained directly on `g_final`'s loss.
    FineClassifierOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub class_weights: ClassWeightMode,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 8,
            batches_per_epoch: 25,
            batch_size: 4,
            adam: AdamConfig::default(),
            class_weights: ClassWeightMode::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs, batches_per_epoch, batch_size must be ≥ 1".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.decay_per_epoch > 0.0) {
            return Err(Error::Validation("learning rate must be ≥ 0 and decay > 0".into()));
        }
        Ok(())
    }
}

/// One JSON line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    #[serde(rename = "L_1")]
    pub l1: Option<f64>,
    #[serde(rename = "L_2")]
    pub l2: Option<f64>,
    #[serde(rename = "L_3")]
    pub l3: Option<f64>,
    #[serde(rename = "L_4")]
    pub l4: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub class_weights: Vec<f64>,
}

/// Draws sphere centres uniformly from points not yet inside any sphere this
/// epoch.
struct CoverSampler {
    alive: Vec<(usize, usize)>,
    pos: Vec<Vec<usize>>,
    sizes: Vec<usize>,
}

impl CoverSampler {
    fn new(sizes: &[usize]) -> CoverSampler {
        let mut s = CoverSampler {
            alive: Vec::new(),
            pos: sizes.iter().map(|&n| vec![usize::MAX; n]).collect(),
            sizes: sizes.to_vec(),
        };
        s.reset();
        s
    }

    fn reset(&mut self) {
        self.alive.clear();
        for (sc, &n) in self.sizes.iter().enumerate() {
            for i in 0..n {
                self.pos[sc][i] = self.alive.len();
                self.alive.push((sc, i));
            }
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        if self.alive.is_empty() {
            self.reset();
        }
        self.alive[rng.random_range(0..self.alive.len())]
    }

    fn cover(&mut self, scene: usize, members: &[usize]) {
        for &i in members {
            let p = self.pos[scene][i];
            if p == usize::MAX {
                continue;
            }
            let last = *self.alive.last().expect("non-empty");
            self.alive.swap_remove(p);
            if p < self.alive.len() {
                self.pos[last.0][last.1] = p;
            }
            self.pos[scene][i] = usize::MAX;
        }
    }
}

/// Loss of one sphere as a graph node, plus the per-classifier report.
pub fn sphere_loss(
    net: &HdvNet,
    store: &ParamStore,
    g: &mut Graph,
    input: &NetInput,
    stage: Stage,
    weights: &[f64],
) -> Result<(Var, Option<LossReport>)> {
    match stage {
        Stage::Backbone => {
            let f = net.forward(g, store, input, Outputs::Heads)?;
            let mut labels = Vec::with_capacity(HEADS);
            let mut masks = Vec::with_capacity(HEADS);
            for a in 0..HEADS {
                let level = &input.levels[a];
                labels.push(level.labels.as_deref().ok_or_else(|| Error::Contract("training needs labels".into()))?);
                masks.push(state_mask(&level.states, a + 1));
            }
            let (loss, report) = combined_loss(g, &f.head_logits, &labels, &masks, weights)?;
            Ok((loss, Some(report)))
        }
        Stage::Finetune | Stage::FineClassifierOnly => {
            let f = net.forward(g, store, input, Outputs::Final)?;
            let level = &input.levels[0];
            let labels = level.labels.as_deref().ok_or_else(|| Error::Contract("training needs labels".into()))?;
            let loss = softmax_xent(
                g,
                f.final_logits.expect("final requested"),
                labels,
                weights,
                &vec![true; labels.len()],
            )?;
            Ok((loss, None))
        }
    }
}

/// Sets the lock flags for `stage`.
pub fn apply_locks(store: &mut ParamStore, stage: Stage) {
    match stage {
        Stage::Backbone => store.lock_only(is_final_param),
        Stage::Finetune => store.lock_only(|n| !is_final_param(n)),
        Stage::FineClassifierOnly => store.lock_only(|_| false),
    }
}

/// Runs one training stage in place on `store`.
pub fn train_stage(
    net: &HdvNet,
    store: &mut ParamStore,
    scenes: &[Scene],
    tcfg: &TrainConfig,
    stage: Stage,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    tcfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("no training scenes".into()));
    }
    let n1 = net.cfg.counts[0];
    if let Some(s) = scenes.iter().find(|s| s.n() < n1) {
        return Err(Error::TargetTooLarge {
            target: n1,
            available: s.n(),
        });
    }
    let mut all_labels = Vec::new();
    for s in scenes {
        all_labels.extend(
            s.cloud
                .labels()
                .ok_or_else(|| Error::Contract(format!("scene {} has no labels", s.cloud.source_id)))?,
        );
    }
    let weights = class_weights(&all_labels, net.cfg.class_count, tcfg.class_weights)?;
    apply_locks(store, stage);
    let indices: Vec<SpatialIndex> = scenes
        .iter()
        .map(|s| SpatialIndex::build(&s.cloud.positions()))
        .collect();
    let mut sampler = CoverSampler::new(&scenes.iter().map(|s| s.n()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(tcfg.adam, store);
    let mut step = 0;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for epoch in 0..tcfg.epochs {
        sampler.reset();
        let lr = tcfg.adam.lr_at(epoch);
        for _ in 0..tcfg.batches_per_epoch {
            let mut jobs = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                let (sc, centre) = sampler.draw(&mut rng);
                let members = sphere_members(&indices[sc], centre, n1)?;
                sampler.cover(sc, &members);
                jobs.push((sc, members, rng.random::<u64>()));
            }
            let frozen: &ParamStore = store;
            let results: Vec<Result<(Vec<(ParamId, Mat)>, f64, Option<LossReport>)>> = jobs
                .par_iter()
                .map(|(sc, members, pseed)| {
                    let input = build_input(&net.cfg, &scenes[*sc], members, *pseed)?;
                    let mut g = Graph::new();
                    let (loss, report) = sphere_loss(net, frozen, &mut g, &input, stage, &weights)?;
                    let value = g.value(loss)[[0, 0]];
                    let grads = g.backward(loss)?;
                    let owned = grads
                        .param_grads()
                        .into_iter()
                        .map(|(id, m)| (id, m.clone()))
                        .collect();
                    Ok((owned, value, report))
                })
                .collect();
            let mut sum: Vec<Option<Mat>> = vec![None; store.len()];
            let mut loss = 0.0;
            let mut reports = Vec::new();
            for r in results {
                let (grads, value, report) = match r {
                    Err(Error::ZeroSupervision) => continue,
                    other => other?,
                };
                loss += value;
                reports.extend(report);
                for (id, m) in grads {
                    match &mut sum[id.0] {
                        Some(s) => *s += &m,
                        slot @ None => *slot = Some(m),
                    }
                }
            }
            let used = if stage == Stage::Backbone { reports.len() } else { tcfg.batch_size };
            if used == 0 {
                return Err(Error::ZeroSupervision);
            }
            loss /= used as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            let scale = 1.0 / used as f64;
            let grads: Vec<(ParamId, Mat)> = sum
                .into_iter()
                .enumerate()
                .filter_map(|(i, m)| m.map(|m| (ParamId(i), m * scale)))
                .collect();
            adam.step(store, &grads, lr);
            let mean_l = |d: usize| {
                (!reports.is_empty()).then(|| reports.iter().map(|r| r.l[d]).sum::<f64>() / reports.len() as f64)
            };
            let entry = StepLog {
                step,
                epoch,
                stage,
                l1: mean_l(0),
                l2: mean_l(1),
                l3: mean_l(2),
                l4: mean_l(3),
                l_total: loss,
                lr,
            };
            writeln!(log, "{}", serde_json::to_string(&entry).expect("log entry"))
                .map_err(|e| Error::io("metrics log", e))?;
            if step == 0 {
                first_loss = loss;
            }
            last_loss = loss;
            step += 1;
        }
    }
    Ok(TrainSummary {
        stage,
        steps: step,
        first_loss,
        last_loss,
        class_weights: weights,
    })
}

pub fn train_backbone(
    net: &HdvNet,
    store: &mut ParamStore,
    scenes: &[Scene],
    tcfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    train_stage(net, store, scenes, tcfg, Stage::Backbone, seed, log)
}

/// Fine-tunes `g_final` on a trained backbone. Every other tensor is locked
/// and left bit-identical.
pub fn finetune_final(
    net: &HdvNet,
    backbone: Option<&mut ParamStore>,
    scenes: &[Scene],
    tcfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let store = backbone.ok_or_else(|| Error::Contract("fine-tuning needs a trained backbone checkpoint".into()))?;
    train_stage(net, store, scenes, tcfg, Stage::Finetune, seed, log)
}
