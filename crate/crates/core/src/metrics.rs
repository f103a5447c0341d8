//! Overlap metrics on binary masks.
//!
//! `DSC = 2|P ∩ G| / (|P| + |G|)` and `IoU = |P ∩ G| / |P ∪ G|`. Both
//! return 1.0 when prediction and ground truth are empty.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Set sizes underlying both metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl Counts {
    pub fn union(&self) -> u64 {
        self.pred + self.truth - self.intersection
    }

    pub fn dsc(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let union = self.union();
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            intersection: self.intersection + o.intersection,
            pred: self.pred + o.pred,
            truth: self.truth + o.truth,
        }
    }
}

fn check_pair(p: &[u8], g: &[u8]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::shape("mask pair", &[p.len()], &[g.len()]));
    }
    if let Some(i) = p.iter().chain(g).position(|&v| v > 1) {
        return Err(Error::Contract(format!("mask value at flat index {i} is not binary")));
    }
    Ok(())
}

pub fn counts(p: &[u8], g: &[u8]) -> Result<Counts> {
    check_pair(p, g)?;
    Ok(p.iter().zip(g).fold(Counts::default(), |mut c, (&a, &b)| {
        c.intersection += u64::from(a & b);
        c.pred += u64::from(a);
        c.truth += u64::from(b);
        c
    }))
}

pub fn dsc(p: &[u8], g: &[u8]) -> Result<f64> {
    counts(p, g).map(|c| c.dsc())
}

pub fn iou(p: &[u8], g: &[u8]) -> Result<f64> {
    counts(p, g).map(|c| c.iou())
}

/// Per-class binary masks for prediction and ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiClassMasks {
    pred: Vec<Vec<u8>>,
    truth: Vec<Vec<u8>>,
}

impl MultiClassMasks {
    /// Validates binary values, matching sizes and that no ground-truth
    /// pixel belongs to two classes.
    pub fn new(pred: Vec<Vec<u8>>, truth: Vec<Vec<u8>>) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::Contract(format!(
                "class count mismatch: {} predicted vs {} ground-truth masks",
                pred.len(),
                truth.len()
            )));
        }
        let n = truth[0].len();
        for (p, g) in pred.iter().zip(&truth) {
            check_pair(p, g)?;
            if g.len() != n {
                return Err(Error::shape("class masks", &[g.len()], &[n]));
            }
        }
        for j in 0..n {
            if truth.iter().map(|g| u32::from(g[j])).sum::<u32>() > 1 {
                return Err(Error::Contract(format!(
                    "ground-truth pixel {j} belongs to more than one class"
                )));
            }
        }
        Ok(MultiClassMasks { pred, truth })
    }

    /// Binary masks of the listed class ids from label maps.
    pub fn from_labels(pred: &[u8], truth: &[u8], classes: &[u8]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape("label maps", &[pred.len()], &[truth.len()]));
        }
        let pick = |labels: &[u8], c: u8| labels.iter().map(|&v| u8::from(v == c)).collect();
        Self::new(
            classes.iter().map(|&c| pick(pred, c)).collect(),
            classes.iter().map(|&c| pick(truth, c)).collect(),
        )
    }

    pub fn classes(&self) -> usize {
        self.pred.len()
    }

    pub fn class_counts(&self) -> Vec<Counts> {
        self.pred
            .iter()
            .zip(&self.truth)
            .map(|(p, g)| counts(p, g).expect("validated"))
            .collect()
    }
}

/// Unweighted mean of per-class IoU.
pub fn miou(masks: &MultiClassMasks) -> f64 {
    let per_class = masks.class_counts();
    per_class.iter().map(Counts::iou).sum::<f64>() / per_class.len() as f64
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub class_id: String,
    pub dsc: f64,
    pub iou: f64,
}

/// CSV with header `sample_id,class_id,dsc,iou`.
pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("sample_id,class_id,dsc,iou\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.sample_id, r.class_id, r.dsc, r.iou).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_nonempty_masks() {
        let m = [1, 0, 1, 1];
        assert_eq!(dsc(&m, &m).unwrap(), 1.0);
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks() {
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap() {
        let p = [1, 1, 1, 1, 0, 0, 0, 0];
        let g = [0, 0, 1, 1, 1, 1, 0, 0];
        assert_eq!(dsc(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn empty_pair_counts_as_perfect() {
        assert_eq!(dsc(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert_eq!(iou(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn non_binary_rejected() {
        assert!(dsc(&[2], &[1]).is_err());
        assert!(dsc(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn miou_perfect_and_half() {
        let labels = [0u8, 1, 2, 1, 0, 2];
        let m = MultiClassMasks::from_labels(&labels, &labels, &[0, 1, 2]).unwrap();
        assert_eq!(miou(&m), 1.0);

        // class 1 perfect, class 2 entirely wrong
        let pred = vec![vec![1, 1, 0, 0], vec![0, 0, 1, 0]];
        let truth = vec![vec![1, 1, 0, 0], vec![0, 0, 0, 1]];
        let m = MultiClassMasks::new(pred, truth).unwrap();
        assert_eq!(miou(&m), 0.5);
    }

    #[test]
    fn single_class_miou_is_iou() {
        let p = vec![1, 1, 0, 1];
        let g = vec![0, 1, 1, 1];
        let m = MultiClassMasks::new(vec![p.clone()], vec![g.clone()]).unwrap();
        assert_eq!(miou(&m), iou(&p, &g).unwrap());
    }

    #[test]
    fn class_count_mismatch_rejected() {
        assert!(MultiClassMasks::new(vec![vec![1]], vec![vec![1], vec![0]]).is_err());
    }

    #[test]
    fn overlapping_truth_rejected() {
        assert!(MultiClassMasks::new(vec![vec![1], vec![0]], vec![vec![1], vec![1]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = rows_to_csv(&[MetricRow {
            sample_id: "3".into(),
            class_id: "avg".into(),
            dsc: 0.5,
            iou: 1.0 / 3.0,
        }]);
        assert_eq!(csv, "sample_id,class_id,dsc,iou\n3,avg,0.500000,0.333333\n");
    }
}
