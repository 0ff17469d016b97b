//! Local density estimates, their quantisation into groups, and the coarser
//! density states used to assign features and mask losses.
//!
//! Conventions used everywhere: a group `δ` holds `t_δ < ρ ≤ t_{δ-1}` and a
//! state `d` holds `t_d < ρ ≤ t_{d-1}`, with `t_{-1} = +∞`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcio::PointCloud;
use crate::spatial::{NeighborTable, SpatialIndex};

/// Density of the densest group boundary, points per m³.
pub const T0: f64 = 2.0e6;
pub const DEFAULT_DELTA_MAX: usize = 17;
pub const DEFAULT_K: usize = 16;
/// Number of density states `d = 0..=5`.
pub const STATE_COUNT: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub rho: Vec<f64>,
    pub group: Vec<usize>,
    pub k_used: usize,
    pub delta_max: usize,
}

impl DensityProfile {
    pub fn n(&self) -> usize {
        self.rho.len()
    }

    pub fn subset(&self, indices: &[usize]) -> DensityProfile {
        DensityProfile {
            rho: indices.iter().map(|&i| self.rho[i]).collect(),
            group: indices.iter().map(|&i| self.group[i]).collect(),
            k_used: self.k_used,
            delta_max: self.delta_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityOptions {
    pub k: usize,
    pub delta_max: usize,
    /// Nudge exact duplicates apart by 1e-9 m instead of failing.
    pub jitter_duplicates: bool,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            k: DEFAULT_K,
            delta_max: DEFAULT_DELTA_MAX,
            jitter_duplicates: false,
        }
    }
}

/// `ρ = k / (4/3 π r³)` for one neighbourhood radius.
pub fn density_from_radius(k: usize, radius: f64) -> f64 {
    k as f64 / (4.0 / 3.0 * PI * radius.powi(3))
}

pub fn estimate_density(neighbors: &NeighborTable) -> Result<Vec<f64>> {
    neighbors
        .radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if r > 0.0 {
                Ok(density_from_radius(neighbors.k, r))
            } else {
                Err(Error::DegenerateNeighborhood { index: i })
            }
        })
        .collect()
}

/// `[t_0, …, t_{delta_max}]` with `t_0 = 2×10⁶` and each a quarter of the last.
pub fn group_thresholds(delta_max: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(delta_max + 1);
    let mut cur = T0;
    for _ in 0..=delta_max {
        t.push(cur);
        cur /= 4.0;
    }
    t
}

/// Smallest `δ` with `ρ > t_δ`; anything at or below the last threshold lands
/// in bucket `thresholds.len()`.
pub fn assign_group(rho: f64, thresholds: &[f64]) -> usize {
    thresholds.partition_point(|&t| rho <= t)
}

pub fn assign_groups(rho: &[f64], thresholds: &[f64]) -> Vec<usize> {
    rho.iter().map(|&r| assign_group(r, thresholds)).collect()
}

/// Deterministically separate exact duplicate positions: the j-th repeat of a
/// position moves `j × 1e-9` m along +x.
pub fn jitter_duplicates(points: &mut [[f64; 3]]) -> usize {
    let orig = points.to_vec();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (orig[a], orig[b]);
        pa[0].total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
            .then(a.cmp(&b))
    });
    let mut moved = 0;
    let mut run = 0usize;
    for w in 1..order.len() {
        if orig[order[w]] == orig[order[w - 1]] {
            run += 1;
            points[order[w]][0] += run as f64 * 1e-9;
            moved += 1;
        } else {
            run = 0;
        }
    }
    moved
}

/// KNN + density + groups for a whole cloud.
pub fn density_profile(cloud: &PointCloud, opts: &DensityOptions) -> Result<DensityProfile> {
    let mut pts = cloud.positions();
    if opts.jitter_duplicates {
        jitter_duplicates(&mut pts);
    }
    let table = SpatialIndex::build(&pts).knn(opts.k)?;
    profile_from_neighbors(&table, opts.delta_max)
}

pub fn profile_from_neighbors(table: &NeighborTable, delta_max: usize) -> Result<DensityProfile> {
    let rho = estimate_density(table)?;
    let group = assign_groups(&rho, &group_thresholds(delta_max));
    Ok(DensityProfile {
        rho,
        group,
        k_used: table.k,
        delta_max,
    })
}

/// Calibrated state boundaries `t_0 > t_1 > … > t_5 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateThresholds {
    pub t: [f64; STATE_COUNT],
    pub k_used: usize,
    pub delta_max: usize,
    /// Standardisation of `log10 ρ` over the calibration set, used as a
    /// network input.
    #[serde(default)]
    pub log_rho_mean: f64,
    #[serde(default = "one")]
    pub log_rho_std: f64,
}

fn one() -> f64 {
    1.0
}

impl StateThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.t[STATE_COUNT - 1] != 0.0 {
            return Err(Error::Calibration("t_5 must be 0".into()));
        }
        if self.t.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Calibration(format!(
                "thresholds not strictly decreasing: {:?}",
                self.t
            )));
        }
        let lattice = group_thresholds(self.delta_max);
        for &t in &self.t[..STATE_COUNT - 1] {
            if !lattice.contains(&t) {
                return Err(Error::Calibration(format!("{t} is not a group threshold")));
            }
        }
        Ok(())
    }

    /// Inherent state of one density value, `0..=5`.
    pub fn state_of(&self, rho: f64) -> u8 {
        // t_d < ρ ≤ t_{d-1}  ⇔  d = #{thresholds ≥ ρ}
        self.t.partition_point(|&t| rho <= t) as u8
    }

    /// State containing every point of group `δ`.
    pub fn state_of_group(&self, group: usize) -> u8 {
        let lattice = group_thresholds(self.delta_max);
        // upper bound of the group interval, t_{δ-1}
        let upper = if group == 0 { f64::INFINITY } else { lattice[group - 1] };
        // the whole interval (t_δ, t_{δ-1}] shares the state of its upper end
        // because state boundaries lie on the lattice
        if upper.is_infinite() {
            0
        } else {
            self.state_of(upper)
        }
    }

    pub fn standardized_log_rho(&self, rho: f64) -> f64 {
        (rho.log10() - self.log_rho_mean) / self.log_rho_std
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("thresholds serialise");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<StateThresholds> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: StateThresholds =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("thresholds: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}

/// Expected number of points left after scan-grid subsampling toward group
/// `target`: a point `Δδ` groups too dense survives with probability `4^{-Δδ}`.
pub fn expected_remaining(groups: &[usize], target: usize) -> f64 {
    groups
        .iter()
        .map(|&g| 0.25f64.powi(target.saturating_sub(g) as i32))
        .sum()
}

/// Choose `t_0..t_4` from the pooled training groups so that subsampling to
/// each threshold leaves a fraction of points closest to `target_fractions`.
///
/// `target_fractions[d]` is `N_{d+1}/N_1` and must be strictly decreasing.
/// Ties go to the sparser threshold. Each state uses a strictly sparser group
/// than the last, so the thresholds stay strictly decreasing.
pub fn calibrate_states(
    profiles: &[DensityProfile],
    target_fractions: &[f64; 5],
) -> Result<StateThresholds> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Calibration("no training profiles".into()))?;
    if target_fractions.windows(2).any(|w| w[0] <= w[1])
        || target_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
    {
        return Err(Error::Calibration(format!(
            "target fractions must be strictly decreasing in (0,1]: {target_fractions:?}"
        )));
    }
    let delta_max = first.delta_max;
    if profiles.iter().any(|p| p.delta_max != delta_max) {
        return Err(Error::Calibration("profiles disagree on delta_max".into()));
    }
    let groups: Vec<usize> = profiles.iter().flat_map(|p| p.group.iter().copied()).collect();
    if groups.is_empty() {
        return Err(Error::Calibration("training profiles are empty".into()));
    }
    if delta_max < 4 {
        return Err(Error::Calibration("delta_max must be at least 4".into()));
    }
    let total = groups.len() as f64;
    let lattice = group_thresholds(delta_max);
    let remaining: Vec<f64> = (0..=delta_max)
        .map(|d| expected_remaining(&groups, d))
        .collect();

    let mut t = [0.0; STATE_COUNT];
    let mut lowest = 0usize;
    for (state, &frac) in target_fractions.iter().enumerate() {
        let target = frac * total;
        // leave room for the remaining states
        let highest = delta_max - (4 - state);
        let mut best = lowest;
        for delta in lowest..=highest {
            let err = (remaining[delta] - target).abs();
            let best_err = (remaining[best] - target).abs();
            if err <= best_err {
                best = delta;
            }
        }
        t[state] = lattice[best];
        lowest = best + 1;
    }
    t[STATE_COUNT - 1] = 0.0;

    let logs: Vec<f64> = profiles
        .iter()
        .flat_map(|p| p.rho.iter().map(|r| r.log10()))
        .collect();
    let mean = logs.iter().sum::<f64>() / total;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / total;
    let out = StateThresholds {
        t,
        k_used: first.k_used,
        delta_max,
        log_rho_mean: mean,
        log_rho_std: var.sqrt().max(1e-6),
    };
    out.validate()?;
    Ok(out)
}

pub fn inherent_state(profile: &DensityProfile, thresholds: &StateThresholds) -> Vec<u8> {
    profile.rho.iter().map(|&r| thresholds.state_of(r)).collect()
}

/// Percentage of points per group `0..=delta_max+1`.
pub fn density_histogram(profile: &DensityProfile) -> Vec<f64> {
    let mut counts = vec![0usize; profile.delta_max + 2];
    for &g in &profile.group {
        counts[g.min(profile.delta_max + 1)] += 1;
    }
    let n = profile.n().max(1) as f64;
    counts.into_iter().map(|c| 100.0 * c as f64 / n).collect()
}
