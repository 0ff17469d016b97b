use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Allocation, Layout};
use crate::subsample::{default_counts, LEVELS};

/// How feature subsections are tied to density states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureAllocation {
    Full,
    None,
    /// Subsections beyond `a_max` are merged into `S^(a_max)`.
    Limited(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HdvConfig {
    /// Subsection widths `E_1..E_5`.
    pub e: [usize; LEVELS],
    /// Hidden widths `H_1..H_5`.
    pub h: [usize; LEVELS],
    pub k_neighbors: usize,
    pub class_count: usize,
    /// Pyramid counts `N_1..N_5`; `N_1` is the sphere size.
    pub counts: [usize; LEVELS],
    pub use_elfa: bool,
    pub feature_allocation: FeatureAllocation,
    /// Width of the relative-position encoding inside LFA/ELFA.
    #[serde(default = "default_pos_width")]
    pub pos_width: usize,
    /// Feed standardised `log10 ρ` as a seventh raw input.
    #[serde(default = "default_true")]
    pub include_density_input: bool,
    #[serde(default = "default_final_hidden")]
    pub final_hidden: usize,
    #[serde(default = "default_gate_hidden")]
    pub gate_hidden: usize,
}

fn default_pos_width() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_final_hidden() -> usize {
    64
}
fn default_gate_hidden() -> usize {
    16
}

pub fn half_widths(e: &[usize; LEVELS]) -> [usize; LEVELS] {
    e.map(|w| w.div_ceil(2))
}

impl Default for HdvConfig {
    fn default() -> HdvConfig {
        let e = [16, 16, 32, 64, 128];
        HdvConfig {
            e,
            h: half_widths(&e),
            k_neighbors: 16,
            class_count: 3,
            counts: default_counts(2048),
            use_elfa: true,
            feature_allocation: FeatureAllocation::Full,
            pos_width: default_pos_width(),
            include_density_input: true,
            final_hidden: default_final_hidden(),
            gate_hidden: default_gate_hidden(),
        }
    }
}

impl HdvConfig {
    /// Small widths for tests and quick runs.
    pub fn tiny(class_count: usize, n1: usize) -> HdvConfig {
        let e = [4, 4, 6, 8, 8];
        HdvConfig {
            e,
            h: half_widths(&e),
            k_neighbors: 6,
            class_count,
            counts: default_counts(n1),
            pos_width: 4,
            final_hidden: 8,
            gate_hidden: 4,
            ..HdvConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.e.contains(&0) || self.h.contains(&0) {
            return bad(format!("widths must be positive: E={:?} H={:?}", self.e, self.h));
        }
        if self.e.iter().zip(&self.h).any(|(e, h)| h > e) {
            return bad(format!("H must not exceed E: E={:?} H={:?}", self.e, self.h));
        }
        if let FeatureAllocation::Limited(a) = self.feature_allocation {
            if !(1..=LEVELS).contains(&a) {
                return bad(format!("limited allocation a_max={a} outside 1..=5"));
            }
        }
        if self.k_neighbors == 0 || self.class_count < 2 {
            return bad("k_neighbors ≥ 1 and class_count ≥ 2 required".into());
        }
        if self.counts.windows(2).any(|w| w[0] <= w[1]) || self.counts[LEVELS - 1] < 2 {
            return bad(format!("counts must be strictly decreasing, ≥ 2: {:?}", self.counts));
        }
        if self.pos_width == 0 || self.final_hidden == 0 || self.gate_hidden == 0 {
            return bad("pos_width, final_hidden, gate_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HdvConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: HdvConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn raw_dim(&self) -> usize {
        if self.include_density_input {
            7
        } else {
            6
        }
    }

    pub fn allocation(&self) -> Allocation {
        match self.feature_allocation {
            FeatureAllocation::None => Allocation::Dense,
            _ => Allocation::Assigned,
        }
    }

    fn merged(&self, widths: &[usize]) -> Layout {
        let mut w = widths.to_vec();
        if let FeatureAllocation::Limited(a_max) = self.feature_allocation {
            if w.len() > a_max {
                let tail: usize = w[a_max - 1..].iter().sum();
                w.truncate(a_max - 1);
                w.push(tail);
            }
        }
        Layout { widths: w }
    }

    /// Feature layout after encoder block `a` (1-based).
    pub fn layout_e(&self, a: usize) -> Layout {
        self.merged(&self.e[..a])
    }

    /// Hidden layout inside encoder block `a`.
    pub fn layout_h(&self, a: usize) -> Layout {
        self.merged(&self.h[..a])
    }

    /// `T_a`.
    pub fn t(&self, a: usize) -> usize {
        self.e[..a].iter().sum()
    }

    /// `U_a`.
    pub fn u(&self, a: usize) -> usize {
        self.h[..a].iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_sum_to_256() {
        let c = HdvConfig::default();
        c.validate().unwrap();
        assert_eq!(c.t(5), 256);
        assert_eq!(c.h, [8, 8, 16, 32, 64]);
    }

    #[test]
    fn limited_merges_tail() {
        let c = HdvConfig {
            feature_allocation: FeatureAllocation::Limited(3),
            ..HdvConfig::default()
        };
        assert_eq!(c.layout_e(2).widths, vec![16, 16]);
        assert_eq!(c.layout_e(3).widths, vec![16, 16, 32]);
        assert_eq!(c.layout_e(5).widths, vec![16, 16, 224]);
        let one = HdvConfig {
            feature_allocation: FeatureAllocation::Limited(1),
            ..HdvConfig::default()
        };
        assert_eq!(one.layout_e(4).widths, vec![128]);
    }

    #[test]
    fn validation() {
        let mut c = HdvConfig::default();
        c.h[2] = 40;
        assert!(c.validate().is_err());
        let mut c = HdvConfig::default();
        c.feature_allocation = FeatureAllocation::Limited(6);
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&HdvConfig::default()).unwrap();
        let back: HdvConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, HdvConfig::default());
        let lim: FeatureAllocation = serde_json::from_str(r#"{"limited":3}"#).unwrap();
        assert_eq!(lim, FeatureAllocation::Limited(3));
    }
}
