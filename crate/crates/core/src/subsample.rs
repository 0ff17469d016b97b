//! Scan-line preserving subsampling and the nested point pyramid.
//!
//! A point `Δδ` groups denser than the target survives only where both its
//! scan row and column are multiples of `2^Δδ`. Dense regions therefore thin
//! out onto a coarser copy of the same scan grid while sparse regions are left
//! alone. Exact target counts are reached by drawing the remainder uniformly
//! from the tier the next grid step would remove.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcio::PointCloud;
use crate::spatial::{NeighborTable, SpatialIndex};

/// Pyramid depth `P^(1)..P^(5)`.
pub const LEVELS: usize = 5;

/// Keep rule for one point: both scan indices divisible by `2^gap`.
pub fn ds_lidar_keep(col: u32, row: u32, delta_gap: u32) -> bool {
    if delta_gap >= 32 {
        return col == 0 && row == 0;
    }
    let m = 1u32 << delta_gap;
    col % m == 0 && row % m == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsampleTarget {
    /// Subsample toward density group `δ_t`.
    Group(usize),
    /// Subsample to exactly this many points.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgsOutcome {
    /// Kept cloud indices, in candidate order.
    pub kept: Vec<usize>,
    /// Every kept point passes the grid rule at this target group.
    pub grid_target: usize,
    /// How many kept points were drawn at random from the next tier.
    pub random_fill: usize,
}

fn grid_keep(cloud: &PointCloud, groups: &[usize], i: usize, target: usize) -> bool {
    let p = &cloud.points[i];
    let gap = target.saturating_sub(groups[i]).min(u32::MAX as usize) as u32;
    ds_lidar_keep(p.col.unwrap_or(0), p.row.unwrap_or(0), gap)
}

/// LiDAR-grid subsampling of `candidates` (indices into `cloud`).
pub fn lidar_grid_subsample(
    cloud: &PointCloud,
    groups: &[usize],
    candidates: &[usize],
    target: SubsampleTarget,
    rng: &mut ChaCha8Rng,
) -> Result<LgsOutcome> {
    if !cloud.has_metadata() {
        return Err(Error::MetadataRequired);
    }
    let kept_at = |t: usize| -> Vec<usize> {
        candidates
            .iter()
            .copied()
            .filter(|&i| grid_keep(cloud, groups, i, t))
            .collect()
    };
    let n_t = match target {
        SubsampleTarget::Group(t) => {
            return Ok(LgsOutcome {
                kept: kept_at(t),
                grid_target: t,
                random_fill: 0,
            })
        }
        SubsampleTarget::Count(n_t) => n_t,
    };
    if n_t > candidates.len() {
        return Err(Error::TargetTooLarge {
            target: n_t,
            available: candidates.len(),
        });
    }
    let max_group = candidates.iter().map(|&i| groups[i]).max().unwrap_or(0);
    // beyond this every gap is ≥ 32 and the kept set no longer changes
    let cap = max_group + 33;

    let mut delta = 0;
    let mut current = kept_at(0);
    debug_assert_eq!(current.len(), candidates.len());
    loop {
        if current.len() == n_t {
            return Ok(LgsOutcome {
                kept: current,
                grid_target: delta,
                random_fill: 0,
            });
        }
        if delta >= cap {
            // grid cannot thin further: sample directly
            let picks = index::sample(rng, current.len(), n_t).into_vec();
            let mut mask = vec![false; current.len()];
            for p in picks {
                mask[p] = true;
            }
            let kept = current
                .iter()
                .zip(&mask)
                .filter_map(|(&i, &m)| m.then_some(i))
                .collect();
            return Ok(LgsOutcome {
                kept,
                grid_target: delta,
                random_fill: n_t,
            });
        }
        let next = kept_at(delta + 1);
        if next.len() < n_t {
            // keep all of `next`, fill from the tier removed by the next step
            let mut in_next = vec![false; cloud.n()];
            for &i in &next {
                in_next[i] = true;
            }
            let tier: Vec<usize> = current.iter().copied().filter(|&i| !in_next[i]).collect();
            let need = n_t - next.len();
            let mut chosen = in_next;
            for p in index::sample(rng, tier.len(), need).into_vec() {
                chosen[tier[p]] = true;
            }
            let kept = candidates.iter().copied().filter(|&i| chosen[i]).collect();
            return Ok(LgsOutcome {
                kept,
                grid_target: delta,
                random_fill: need,
            });
        }
        current = next;
        delta += 1;
    }
}

/// Uniform sample without replacement, in candidate order.
pub fn random_subsample(candidates: &[usize], n_t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n_t > candidates.len() {
        return Err(Error::TargetTooLarge {
            target: n_t,
            available: candidates.len(),
        });
    }
    let mut mask = vec![false; candidates.len()];
    for p in index::sample(rng, candidates.len(), n_t).into_vec() {
        mask[p] = true;
    }
    Ok(candidates
        .iter()
        .zip(&mask)
        .filter_map(|(&i, &m)| m.then_some(i))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// Indices into the source cloud.
    pub indices: Vec<usize>,
    /// Position in the previous level of each point here (empty at level 1).
    pub down: Vec<usize>,
    /// For each point of the previous level, position of its nearest point
    /// here (empty at level 1).
    pub up_map: Vec<usize>,
    /// Which points of the previous level survived (empty at level 1).
    pub keep_mask: Vec<bool>,
    pub neighbors: NeighborTable,
    /// Grid target group, or `None` when the random path was used.
    pub grid_target: Option<usize>,
    pub random_fill: usize,
}

impl PyramidLevel {
    pub fn n(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidState {
    pub levels: Vec<PyramidLevel>,
    /// False when the cloud had no scan metadata and random subsampling was used.
    pub used_lidar_grid: bool,
}

impl PyramidState {
    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(PyramidLevel::n).collect()
    }
}

/// Geometric decimation `N_{d+1} = N_d / 4`, floored so small inputs still
/// give strictly decreasing counts ending at 2 or more.
pub fn default_counts(n1: usize) -> [usize; LEVELS] {
    let mut c = [n1; LEVELS];
    for d in 1..LEVELS {
        c[d] = (c[d - 1] / 4).max(LEVELS + 1 - d);
    }
    c
}

pub fn build_pyramid(
    cloud: &PointCloud,
    groups: &[usize],
    counts: &[usize; LEVELS],
    k: usize,
    seed: u64,
) -> Result<PyramidState> {
    if groups.len() != cloud.n() {
        return Err(Error::Shape(format!(
            "{} groups for {} points",
            groups.len(),
            cloud.n()
        )));
    }
    if counts.windows(2).any(|w| w[0] <= w[1]) || counts[LEVELS - 1] < 2 {
        return Err(Error::Contract(format!(
            "pyramid counts must be strictly decreasing and at least 2: {counts:?}"
        )));
    }
    if cloud.n() < counts[0] {
        return Err(Error::TargetTooLarge {
            target: counts[0],
            available: cloud.n(),
        });
    }
    let lidar = cloud.has_metadata();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = cloud.positions();
    let mut levels: Vec<PyramidLevel> = Vec::with_capacity(LEVELS);
    let all: Vec<usize> = (0..cloud.n()).collect();
    for (d, &n_d) in counts.iter().enumerate() {
        let source: &[usize] = levels.last().map_or(&all, |l| &l.indices);
        let (indices, grid_target, random_fill) = if lidar {
            let out = lidar_grid_subsample(cloud, groups, source, SubsampleTarget::Count(n_d), &mut rng)?;
            (out.kept, Some(out.grid_target), out.random_fill)
        } else {
            (random_subsample(source, n_d, &mut rng)?, None, n_d)
        };
        let pts: Vec<[f64; 3]> = indices.iter().map(|&i| positions[i]).collect();
        let index = SpatialIndex::build(&pts);
        let k_d = k.min(n_d - 1);
        let neighbors = index.knn(k_d)?;
        let (down, up_map, keep_mask) = if d == 0 {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            let prev = &levels[d - 1].indices;
            let mut pos_in_prev = vec![usize::MAX; cloud.n()];
            for (p, &i) in prev.iter().enumerate() {
                pos_in_prev[i] = p;
            }
            let down: Vec<usize> = indices.iter().map(|&i| pos_in_prev[i]).collect();
            let mut keep_mask = vec![false; prev.len()];
            for &p in &down {
                keep_mask[p] = true;
            }
            let prev_pts: Vec<[f64; 3]> = prev.iter().map(|&i| positions[i]).collect();
            (down, index.nearest_each(&prev_pts)?, keep_mask)
        };
        levels.push(PyramidLevel {
            indices,
            down,
            up_map,
            keep_mask,
            neighbors,
            grid_target,
            random_fill,
        });
    }
    Ok(PyramidState {
        levels,
        used_lidar_grid: lidar,
    })
}

/// Kept-index lists written by the `subsample` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PyramidSummary {
    pub counts: Vec<usize>,
    pub used_lidar_grid: bool,
    pub grid_targets: Vec<Option<usize>>,
    pub random_fill: Vec<usize>,
}

impl From<&PyramidState> for PyramidSummary {
    fn from(p: &PyramidState) -> Self {
        PyramidSummary {
            counts: p.counts(),
            used_lidar_grid: p.used_lidar_grid,
            grid_targets: p.levels.iter().map(|l| l.grid_target).collect(),
            random_fill: p.levels.iter().map(|l| l.random_fill).collect(),
        }
    }
}
