//! Whole-scene inference: greedy sphere cover, per-sphere prediction,
//! distance-weighted vote fusion and nearest-point label upsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::input::sphere_members;
use crate::model::{build_input, HdvNet, NetInput, Outputs, Scene, HEADS};
use crate::nn::graph::softmax_in_place;
use crate::nn::{Graph, Mat, ParamStore};
use crate::spatial::SpatialIndex;

/// Minimum vote weight, so the farthest member of a sphere still counts.
pub const MIN_VOTE_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereJob {
    pub centre: usize,
    pub members: Vec<usize>,
    pub centre_xyz: [f64; 3],
}

/// Repeatedly draws an uncovered point, emits its `n1`-nearest sphere and marks
/// the members covered, until every point is covered.
pub fn plan_spheres(index: &SpatialIndex, n1: usize, seed: u64) -> Result<Vec<SphereJob>> {
    let n = index.len();
    if n < n1 || n1 == 0 {
        return Err(Error::TargetTooLarge {
            target: n1,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uncovered: Vec<usize> = (0..n).collect();
    let mut pos: Vec<usize> = (0..n).collect();
    let mut jobs = Vec::new();
    while !uncovered.is_empty() {
        let centre = uncovered[rng.random_range(0..uncovered.len())];
        let members = sphere_members(index, centre, n1)?;
        for &m in &members {
            let p = pos[m];
            if p == usize::MAX {
                continue;
            }
            let last = *uncovered.last().expect("non-empty");
            uncovered.swap_remove(p);
            if p < uncovered.len() {
                pos[last] = p;
            }
            pos[m] = usize::MAX;
        }
        jobs.push(SphereJob {
            centre,
            centre_xyz: index.points()[centre],
            members,
        });
    }
    Ok(jobs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `g_final`.
    Final,
    /// Each point read from `g_{clamp(d, 1, 4)}` of its own inherent state.
    TrainingClassifiers,
}

fn softmax_rows(mut m: Mat) -> Mat {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    m
}

/// `N_1 × k` class probabilities for the level-1 points of `input`, in
/// `input.members` order.
pub fn predict_sphere(net: &HdvNet, store: &ParamStore, input: &NetInput, mode: InferenceMode) -> Result<Mat> {
    let mut g = Graph::new();
    match mode {
        InferenceMode::Final => {
            let f = net.forward(&mut g, store, input, Outputs::Final)?;
            Ok(softmax_rows(g.value(f.final_logits.expect("requested")).clone()))
        }
        InferenceMode::TrainingClassifiers => {
            let f = net.forward(&mut g, store, input, Outputs::Heads)?;
            let n1 = input.n1();
            let k = net.cfg.class_count;
            let mut out = Mat::zeros((n1, k));
            let states = &input.levels[0].states;
            for i in 0..n1 {
                let a = (states[i] as usize).clamp(1, HEADS);
                let row = input.to_level[a - 1][i];
                out.row_mut(i).assign(&g.value(f.head_logits[a - 1]).row(row));
            }
            Ok(softmax_rows(out))
        }
    }
}

/// One sphere's contribution: probabilities for `members`, row by row.
#[derive(Debug, Clone)]
pub struct Vote {
    pub centre_xyz: [f64; 3],
    pub members: Vec<usize>,
    pub probs: Mat,
}

/// Weighted sum of sphere votes and argmax per point (ties to the lower
/// class). Votes are accumulated in the given order.
pub fn fuse_votes(positions: &[[f64; 3]], votes: &[Vote], k: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    let mut acc = vec![0.0; n * k];
    let mut weight = vec![0.0; n];
    for v in votes {
        if v.probs.dim() != (v.members.len(), k) {
            return Err(Error::Shape(format!(
                "vote of {:?} for {} members and {k} classes",
                v.probs.dim(),
                v.members.len()
            )));
        }
        let dist: Vec<f64> = v
            .members
            .iter()
            .map(|&m| {
                let p = positions[m];
                let c = v.centre_xyz;
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
            })
            .collect();
        let max = dist.iter().copied().fold(0.0, f64::max);
        for (r, &m) in v.members.iter().enumerate() {
            let w = if max > 0.0 { (1.0 - dist[r] / max).max(MIN_VOTE_WEIGHT) } else { 1.0 };
            for c in 0..k {
                acc[m * k + c] += w * v.probs[[r, c]];
            }
            weight[m] += w;
        }
    }
    if let Some(i) = weight.iter().position(|&w| w == 0.0) {
        return Err(Error::Contract(format!("point {i} received no vote")));
    }
    Ok((0..n)
        .map(|i| {
            let row = &acc[i * k..(i + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SceneInference {
    pub predictions: Vec<usize>,
    pub jobs: usize,
}

/// Predicts every point of `scene`.
pub fn infer_scene(
    net: &HdvNet,
    store: &ParamStore,
    scene: &Scene,
    mode: InferenceMode,
    seed: u64,
) -> Result<SceneInference> {
    let positions = scene.cloud.positions();
    let index = SpatialIndex::build(&positions);
    let jobs = plan_spheres(&index, net.cfg.counts[0], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1a7e);
    let seeds: Vec<u64> = jobs.iter().map(|_| rng.random()).collect();
    let votes: Vec<Result<Vote>> = jobs
        .par_iter()
        .zip(&seeds)
        .map(|(job, &s)| {
            let input = build_input(&net.cfg, scene, &job.members, s)?;
            let probs = predict_sphere(net, store, &input, mode)?;
            Ok(Vote {
                centre_xyz: job.centre_xyz,
                members: input.members,
                probs,
            })
        })
        .collect();
    let votes = votes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SceneInference {
        predictions: fuse_votes(&positions, &votes, net.cfg.class_count)?,
        jobs: jobs.len(),
    })
}

/// Each original point takes the prediction of its nearest processed point.
pub fn upsample_predictions(
    processed: &[[f64; 3]],
    predictions: &[usize],
    original: &[[f64; 3]],
) -> Result<Vec<usize>> {
    if processed.is_empty() {
        return Err(Error::Contract("no processed points to upsample from".into()));
    }
    if processed.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} processed points, {} predictions",
            processed.len(),
            predictions.len()
        )));
    }
    let index = SpatialIndex::build(processed);
    Ok(index
        .nearest_each(original)?
        .into_iter()
        .map(|i| predictions[i])
        .collect())
}
