//! Pixel confusion counts and the derived segmentation metrics.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ChangeMask;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("prediction is {pred_h}x{pred_w}, ground truth is {gt_h}x{gt_w}")]
    Dimensions {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("confusion matrix is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionMatrix, MetricsError> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(MetricsError::Dimensions {
            pred_h: pred.h(),
            pred_w: pred.w(),
            gt_h: gt.h(),
            gt_w: gt.w(),
        });
    }
    let mut counts = [0u64; 4];
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        counts[usize::from(p) * 2 + usize::from(g)] += 1;
    }
    Ok(ConfusionMatrix {
        tn: counts[0],
        fn_: counts[1],
        fp: counts[2],
        tp: counts[3],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

impl Metrics {
    pub fn as_percent(&self) -> Metrics {
        Metrics {
            precision: self.precision * 100.0,
            recall: self.recall * 100.0,
            f1: self.f1 * 100.0,
            iou: self.iou * 100.0,
            oa: self.oa * 100.0,
        }
    }
}

/// A ratio whose zero denominator means both the predicted and the true
/// change sets are empty scores 1; any other zero denominator scores 0.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let both_empty = cm.tp + cm.fp == 0 && cm.tp + cm.fn_ == 0;
    Ok(Metrics {
        precision: ratio(cm.tp, cm.tp + cm.fp, both_empty),
        recall: ratio(cm.tp, cm.tp + cm.fn_, both_empty),
        // 2tp/(2tp+fp+fn) is 2PR/(P+R) without the 0/0 when tp = 0.
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, both_empty),
        iou: ratio(cm.tp, cm.tp + cm.fp + cm.fn_, both_empty),
        oa: (cm.tp + cm.tn) as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ChangeMask {
        let bytes: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        ChangeMask::from_bytes(h, w, &bytes).unwrap()
    }

    #[test]
    fn hand_example() {
        let cm = ConfusionMatrix { tp: 50, fp: 10, fn_: 10, tn: 30 };
        let m = metrics(&cm).unwrap();
        assert!((m.precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.recall - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.f1 - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.iou - 0.714_285_714_285_714_3).abs() < 1e-12);
        assert!((m.oa - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_and_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, 8, 8);
        let cm = confusion(&m, &m).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        let mt = metrics(&cm).unwrap();
        assert_eq!([mt.precision, mt.recall, mt.f1, mt.iou, mt.oa], [1.0; 5]);

        let inv: Vec<u8> = m.values().iter().map(|v| 1 - v).collect();
        let inv = ChangeMask::from_bytes(8, 8, &inv).unwrap();
        let cm = confusion(&inv, &m).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
    }

    #[test]
    fn empty_sets_score_one() {
        let z = ChangeMask::zeros(4, 4);
        let m = metrics(&confusion(&z, &z).unwrap()).unwrap();
        assert_eq!([m.precision, m.recall, m.f1, m.iou, m.oa], [1.0; 5]);
        let cm = ConfusionMatrix { tp: 0, fp: 3, fn_: 0, tn: 5 };
        let m = metrics(&cm).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(metrics(&ConfusionMatrix::default()), Err(MetricsError::Empty));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(confusion(&ChangeMask::zeros(2, 2), &ChangeMask::zeros(2, 3)).is_err());
    }

    #[test]
    fn matches_brute_force_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut running = ConfusionMatrix::default();
        for _ in 0..200 {
            let p = random_mask(&mut rng, 8, 8);
            let g = random_mask(&mut rng, 8, 8);
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for y in 0..8 {
                for x in 0..8 {
                    match (p.get(y, x), g.get(y, x)) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
            let cm = confusion(&p, &g).unwrap();
            assert_eq!(cm, ConfusionMatrix { tp, fp, fn_, tn });
            running += cm;
            let m = metrics(&cm).unwrap();
            assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        }
        assert_eq!(running.total(), 200 * 64);
    }

    #[test]
    fn serializes_fn_field() {
        let s = serde_json::to_string(&ConfusionMatrix { tp: 1, fp: 2, fn_: 3, tn: 4 }).unwrap();
        assert_eq!(s, r#"{"tp":1,"fp":2,"fn":3,"tn":4}"#);
    }
}
