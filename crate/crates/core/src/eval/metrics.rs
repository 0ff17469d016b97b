//! IoU / MIoU and the per-density-state report.

use serde::{Deserialize, Serialize};

use crate::density::{inherent_state, DensityProfile, StateThresholds, STATE_COUNT};
use crate::error::{Error, Result};

/// `k × k` confusion counts, `[label][prediction]`, over masked points.
pub fn confusion(predictions: &[usize], labels: &[usize], mask: Option<&[bool]>, k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for i in 0..labels.len() {
        if mask.is_none_or(|m| m[i]) {
            m[labels[i]][predictions[i]] += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// IoU per class; `None` for classes absent from both labels and
    /// predictions in the slice.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub points: usize,
}

/// IoU per class and their mean over classes present in the slice.
pub fn miou(predictions: &[usize], labels: &[usize], mask: Option<&[bool]>, k: usize) -> Result<MiouResult> {
    if predictions.len() != labels.len() || mask.is_some_and(|m| m.len() != labels.len()) {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Validation(format!("class {bad} outside 0..{k}")));
    }
    let points = mask.map_or(labels.len(), |m| m.iter().filter(|&&b| b).count());
    if points == 0 {
        return Err(Error::EmptySlice);
    }
    let cm = confusion(predictions, labels, mask, k);
    let iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm[c][c];
            let fn_: u64 = cm[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|r| cm[r][c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouResult { iou, miou, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsColumn {
    /// `All` or `I0`..`I5`.
    pub name: String,
    /// `None` when the slice is empty.
    pub miou: Option<f64>,
    pub iou: Vec<Option<f64>>,
    pub points: usize,
    /// Percentage of the scene in this slice.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub class_names: Vec<String>,
    /// `All`, then `I5` down to `I0`.
    pub columns: Vec<MetricsColumn>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<&MetricsColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn state(&self, d: usize) -> Option<&MetricsColumn> {
        self.column(&format!("I{d}"))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header).expect("in-memory csv");
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.4}", 100.0 * x));
        let mut row = vec!["MIoU".to_string()];
        row.extend(self.columns.iter().map(|c| fmt(c.miou)));
        w.write_record(&row).expect("in-memory csv");
        for (k, name) in self.class_names.iter().enumerate() {
            let mut row = vec![format!("IoU {name}")];
            row.extend(self.columns.iter().map(|c| fmt(c.iou.get(k).copied().flatten())));
            w.write_record(&row).expect("in-memory csv");
        }
        let mut row = vec!["points".to_string()];
        row.extend(self.columns.iter().map(|c| c.points.to_string()));
        w.write_record(&row).expect("in-memory csv");
        let mut row = vec!["proportion %".to_string()];
        row.extend(self.columns.iter().map(|c| format!("{:.4}", c.proportion)));
        w.write_record(&row).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut s = String::from("| |");
        for c in &self.columns {
            s.push_str(&format!(" {} |", c.name));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.columns.len()));
        s.push_str("\n| MIoU |");
        for c in &self.columns {
            s.push_str(&format!(" {} |", fmt(c.miou)));
        }
        for (k, name) in self.class_names.iter().enumerate() {
            s.push_str(&format!("\n| {name} |"));
            for c in &self.columns {
                s.push_str(&format!(" {} |", fmt(c.iou.get(k).copied().flatten())));
            }
        }
        s.push_str("\n| % of scene |");
        for c in &self.columns {
            s.push_str(&format!(" {:.1} |", c.proportion));
        }
        s.push('\n');
        s
    }
}

/// Joint `All` column plus one column per inherent state, `I5` first.
pub fn per_density_report(
    predictions: &[usize],
    labels: &[usize],
    states: &[u8],
    class_names: &[String],
) -> Result<MetricsTable> {
    let k = class_names.len();
    if states.len() != labels.len() {
        return Err(Error::Shape(format!("{} states for {} labels", states.len(), labels.len())));
    }
    let all = miou(predictions, labels, None, k)?;
    let n = labels.len() as f64;
    let mut columns = vec![MetricsColumn {
        name: "All".into(),
        miou: Some(all.miou),
        iou: all.iou,
        points: all.points,
        proportion: 100.0,
    }];
    for d in (0..STATE_COUNT).rev() {
        let mask: Vec<bool> = states.iter().map(|&s| s as usize == d).collect();
        let col = match miou(predictions, labels, Some(&mask), k) {
            Ok(r) => MetricsColumn {
                name: format!("I{d}"),
                miou: Some(r.miou),
                iou: r.iou,
                points: r.points,
                proportion: 100.0 * r.points as f64 / n,
            },
            Err(Error::EmptySlice) => MetricsColumn {
                name: format!("I{d}"),
                miou: None,
                iou: vec![None; k],
                points: 0,
                proportion: 0.0,
            },
            Err(e) => return Err(e),
        };
        columns.push(col);
    }
    Ok(MetricsTable {
        class_names: class_names.to_vec(),
        columns,
    })
}

/// As [`per_density_report`], deriving the states from a profile.
pub fn per_density_report_from_profile(
    predictions: &[usize],
    labels: &[usize],
    profile: &DensityProfile,
    thresholds: &StateThresholds,
    class_names: &[String],
) -> Result<MetricsTable> {
    per_density_report(predictions, labels, &inherent_state(profile, thresholds), class_names)
}

/// Names for `k` classes: the synthetic set's names when `k == 3`.
pub fn class_names(k: usize) -> Vec<String> {
    if k == super::scene::CLASS_NAMES.len() {
        super::scene::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|c| format!("class{c}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let l = vec![0, 1, 2, 2, 1];
        let r = miou(&l, &l, None, 3).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.iou.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn binary_formula() {
        // class A = 0: one TP, one FP
        let r = miou(&[0, 0], &[0, 1], None, 2).unwrap();
        assert_eq!(r.iou[0], Some(0.5));
        assert_eq!(r.iou[1], Some(0.0));
    }

    #[test]
    fn empty_slice_and_absent_classes() {
        assert!(matches!(miou(&[0], &[0], Some(&[false]), 2), Err(Error::EmptySlice)));
        let r = miou(&[0, 0], &[0, 0], None, 3).unwrap();
        assert_eq!(r.iou, vec![Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn report_columns_and_proportions() {
        let states = [0u8, 0, 1, 5, 5];
        let labels = [0, 1, 0, 1, 1];
        let t = per_density_report(&labels, &labels, &states, &class_names(2)).unwrap();
        let names: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["All", "I5", "I4", "I3", "I2", "I1", "I0"]);
        let total: f64 = t.columns[1..].iter().map(|c| c.proportion).sum();
        assert!((total - 100.0).abs() < 1e-9);
        assert_eq!(t.state(3).unwrap().miou, None);
        assert!(t.to_markdown().contains("n/a"));
        assert!(t.to_csv().starts_with("metric,All,I5"));
    }

    #[test]
    fn single_state_all_equals_slice() {
        let labels = [0, 1, 2, 1];
        let preds = [0, 2, 2, 1];
        let t = per_density_report(&preds, &labels, &[2; 4], &class_names(3)).unwrap();
        assert_eq!(t.column("All").unwrap().miou, t.state(2).unwrap().miou);
    }
}
