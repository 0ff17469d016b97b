//! Per-sphere network inputs: pyramid levels with neighbour tables, raw point
//! values, relative-position features and inherent states.

use crate::density::{density_profile, inherent_state, DensityOptions, DensityProfile, StateThresholds};
use crate::error::{Error, Result};
use crate::model::config::HdvConfig;
use crate::nn::Mat;
use crate::pcio::PointCloud;
use crate::spatial::SpatialIndex;
use crate::subsample::{build_pyramid, PyramidState, LEVELS};

/// Width of the relative-position feature `[p_i, p_k, p_i − p_k, |p_i − p_k|]`.
pub const REL_DIM: usize = 10;

/// A labelled or unlabelled scene with its density profile and states.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub profile: DensityProfile,
    pub states: Vec<u8>,
    pub std_log_rho: Vec<f64>,
}

impl Scene {
    pub fn prepare(cloud: PointCloud, thresholds: &StateThresholds) -> Result<Scene> {
        let opts = DensityOptions {
            k: thresholds.k_used,
            delta_max: thresholds.delta_max,
            jitter_duplicates: true,
        };
        let profile = density_profile(&cloud, &opts)?;
        let states = inherent_state(&profile, thresholds);
        let std_log_rho = profile
            .rho
            .iter()
            .map(|&r| thresholds.standardized_log_rho(r))
            .collect();
        Ok(Scene {
            cloud,
            profile,
            states,
            std_log_rho,
        })
    }

    pub fn n(&self) -> usize {
        self.cloud.n()
    }
}

#[derive(Debug, Clone)]
pub struct LevelInput {
    pub n: usize,
    pub k: usize,
    /// Row-major `n × k` neighbour positions within this level.
    pub neighbors: Vec<usize>,
    /// `n·k × REL_DIM`.
    pub rel: Mat,
    /// `n × raw_dim`: centred xyz, rgb and optionally standardised log ρ.
    pub raw: Mat,
    pub states: Vec<u8>,
    pub labels: Option<Vec<usize>>,
    /// Position in the previous level of each point (empty at level 1).
    pub down: Vec<usize>,
    /// For each point of the previous level, nearest point here (empty at
    /// level 1).
    pub up_map: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NetInput {
    pub levels: Vec<LevelInput>,
    /// Scene indices of the level-1 points.
    pub members: Vec<usize>,
    /// `to_level[a-1][i]`: position in level `a` of the point standing in for
    /// level-1 point `i`, for `a = 1..=4`.
    pub to_level: Vec<Vec<usize>>,
    /// `N_1 × 4`: existence flags `B^1, B^2, B^3` and standardised log ρ.
    pub gate_input: Mat,
}

impl NetInput {
    pub fn n1(&self) -> usize {
        self.levels[0].n
    }
}

/// The `n1` scene points nearest to `centre`, nearest first (the centre
/// itself leads).
pub fn sphere_members(index: &SpatialIndex, centre: usize, n1: usize) -> Result<Vec<usize>> {
    if index.len() < n1 {
        return Err(Error::TargetTooLarge {
            target: n1,
            available: index.len(),
        });
    }
    let q = index.points()[centre];
    Ok(index.nearest(&q, n1, None).into_iter().map(|(i, _)| i).collect())
}

pub fn relative_features(positions: &[[f64; 3]], neighbors: &[usize], k: usize) -> Mat {
    let n = positions.len();
    let mut rel = Mat::zeros((n * k, REL_DIM));
    for i in 0..n {
        let pi = positions[i];
        for j in 0..k {
            let pk = positions[neighbors[i * k + j]];
            let mut row = rel.row_mut(i * k + j);
            let mut d2 = 0.0;
            for c in 0..3 {
                let diff = pi[c] - pk[c];
                row[c] = pi[c];
                row[3 + c] = pk[c];
                row[6 + c] = diff;
                d2 += diff * diff;
            }
            row[9] = d2.sqrt();
        }
    }
    rel
}

/// Builds the network input for one sphere of scene points.
pub fn build_input(cfg: &HdvConfig, scene: &Scene, members: &[usize], seed: u64) -> Result<NetInput> {
    if members.len() != cfg.counts[0] {
        return Err(Error::Contract(format!(
            "sphere has {} points, model expects N_1 = {}",
            members.len(),
            cfg.counts[0]
        )));
    }
    let sub = scene.cloud.subset(members);
    let groups: Vec<usize> = members.iter().map(|&i| scene.profile.group[i]).collect();
    let pyramid = build_pyramid(&sub, &groups, &cfg.counts, cfg.k_neighbors, seed)?;
    Ok(assemble(cfg, scene, members, &sub, &pyramid))
}

fn assemble(
    cfg: &HdvConfig,
    scene: &Scene,
    members: &[usize],
    sub: &PointCloud,
    pyramid: &PyramidState,
) -> NetInput {
    let positions = sub.positions();
    let n1 = positions.len() as f64;
    let mut centre = [0.0; 3];
    for p in &positions {
        for c in 0..3 {
            centre[c] += p[c] / n1;
        }
    }
    let labels = sub.labels();
    let raw_dim = cfg.raw_dim();
    let mut levels = Vec::with_capacity(LEVELS);
    for level in &pyramid.levels {
        let n = level.n();
        let k = level.neighbors.k;
        let pts: Vec<[f64; 3]> = level
            .indices
            .iter()
            .map(|&i| {
                let p = positions[i];
                [p[0] - centre[0], p[1] - centre[1], p[2] - centre[2]]
            })
            .collect();
        let mut raw = Mat::zeros((n, raw_dim));
        for (r, &i) in level.indices.iter().enumerate() {
            let p = &sub.points[i];
            let vals = [pts[r][0], pts[r][1], pts[r][2], p.r, p.g, p.b, scene.std_log_rho[members[i]]];
            for c in 0..raw_dim {
                raw[[r, c]] = vals[c];
            }
        }
        levels.push(LevelInput {
            n,
            k,
            rel: relative_features(&pts, &level.neighbors.indices, k),
            neighbors: level.neighbors.indices.clone(),
            raw,
            states: level.indices.iter().map(|&i| scene.states[members[i]]).collect(),
            labels: labels
                .as_ref()
                .map(|l| level.indices.iter().map(|&i| l[i]).collect()),
            down: level.down.clone(),
            up_map: level.up_map.clone(),
        });
    }
    let n1 = levels[0].n;
    let mut to_level = vec![(0..n1).collect::<Vec<usize>>()];
    for a in 1..LEVELS - 1 {
        let prev = &to_level[a - 1];
        let next = prev.iter().map(|&p| levels[a].up_map[p]).collect();
        to_level.push(next);
    }
    let mut gate_input = Mat::zeros((n1, 4));
    for (r, &i) in pyramid.levels[0].indices.iter().enumerate() {
        let s = scene.states[members[i]];
        for d in 1..=3u8 {
            gate_input[[r, d as usize - 1]] = if s <= d { 1.0 } else { 0.0 };
        }
        gate_input[[r, 3]] = scene.std_log_rho[members[i]];
    }
    NetInput {
        members: pyramid.levels[0].indices.iter().map(|&i| members[i]).collect(),
        levels,
        to_level,
        gate_input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_features_layout() {
        let pts = [[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]];
        let rel = relative_features(&pts, &[1, 0], 1);
        assert_eq!(rel.row(0).to_vec(), vec![0.0, 0.0, 0.0, 3.0, 4.0, 0.0, -3.0, -4.0, 0.0, 5.0]);
        assert_eq!(rel[[1, 9]], 5.0);
    }
}
