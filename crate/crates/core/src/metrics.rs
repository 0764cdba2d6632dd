//! Confusion counts and per-class IoU, precision and recall.
//!
//! Ratios with a zero denominator count as 1.0: a class that is absent from
//! both prediction and ground truth is perfectly segmented. Dataset-level
//! numbers come from summed confusion counts (micro-averaging).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Class, LabelImage, NUM_CLASSES};

/// `counts[truth][predicted]` pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn sum<'a>(all: impl IntoIterator<Item = &'a ConfusionCounts>) -> ConfusionCounts {
        let mut out = ConfusionCounts::default();
        for c in all {
            out.merge(c);
        }
        out
    }
}

pub fn confusion(pred: &LabelImage, truth: &LabelImage) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::dims(
            format!("{}x{}", truth.height(), truth.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.classes().iter().zip(truth.classes()) {
        c.counts[g as usize][p as usize] += 1;
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: Class,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    /// Background, printed, handwritten.
    pub classes: [ClassMetrics; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Arithmetic mean of the per-class IoUs, background included.
pub fn mean_iou(ious: [f64; NUM_CLASSES]) -> f64 {
    ious.iter().sum::<f64>() / NUM_CLASSES as f64
}

impl MetricsReport {
    pub fn from_classes(classes: [ClassMetrics; NUM_CLASSES]) -> Self {
        Self { miou: mean_iou(classes.map(|c| c.iou)), classes }
    }

    pub fn class(&self, class: Class) -> &ClassMetrics {
        &self.classes[class as usize]
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned plain-text table: one row per class, then the mean IoU.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>7} {:>7}\n", "class", "IoU", "Prec.", "Recall");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<12} {:>7.3} {:>7.3} {:>7.3}",
                c.class.name(),
                c.iou,
                c.precision,
                c.recall
            );
        }
        let _ = writeln!(s, "{:<12} {:>7.3}", "mIoU", self.miou);
        s
    }
}

pub fn report(counts: &ConfusionCounts) -> MetricsReport {
    let m = &counts.counts;
    let classes = Class::ALL.map(|class| {
        let c = class as usize;
        let tp = m[c][c];
        let fn_: u64 = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| m[c][p]).sum();
        let fp: u64 = (0..NUM_CLASSES).filter(|&g| g != c).map(|g| m[g][c]).sum();
        ClassMetrics {
            class,
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    });
    MetricsReport::from_classes(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(h: usize, w: usize, v: &[u8]) -> LabelImage {
        LabelImage::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_labels_give_diagonal_counts_and_perfect_scores() {
        let l = label(2, 3, &[0, 1, 2, 2, 1, 0]);
        let c = confusion(&l, &l).unwrap();
        assert_eq!(c.counts, [[2, 0, 0], [0, 2, 0], [0, 0, 2]]);
        let r = report(&c);
        assert_eq!(r.miou, 1.0);
        assert!(r.classes.iter().all(|m| m.iou == 1.0 && m.precision == 1.0 && m.recall == 1.0));
    }

    #[test]
    fn hand_counted_example() {
        #[rustfmt::skip]
        let truth = label(4, 4, &[
            0, 0, 1, 1,
            0, 2, 2, 1,
            0, 0, 0, 0,
            1, 1, 2, 0,
        ]);
        #[rustfmt::skip]
        let pred = label(4, 4, &[
            0, 1, 1, 0,
            0, 2, 1, 1,
            0, 0, 2, 0,
            1, 0, 2, 0,
        ]);
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(c.counts, [[6, 1, 1], [2, 3, 0], [0, 1, 2]]);
        assert_eq!(c.total(), 16);
        let r = report(&c);
        assert!((r.classes[1].iou - 3.0 / 7.0).abs() < 1e-12);
        assert!((r.classes[1].precision - 3.0 / 5.0).abs() < 1e-12);
        assert!((r.classes[1].recall - 3.0 / 5.0).abs() < 1e-12);
        assert!((r.classes[2].iou - 2.0 / 4.0).abs() < 1e-12);
        assert!((r.classes[0].iou - 6.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn all_background_prediction() {
        let truth = label(1, 4, &[0, 1, 2, 0]);
        let pred = label(1, 4, &[0, 0, 0, 0]);
        let r = report(&confusion(&pred, &truth).unwrap());
        assert_eq!(r.classes[1].iou, 0.0);
        assert_eq!(r.classes[2].iou, 0.0);
        assert_eq!(r.classes[0].recall, 1.0);
        // No printed predictions at all: precision is vacuous.
        assert_eq!(r.classes[1].precision, 1.0);
    }

    #[test]
    fn spot_value() {
        let r = MetricsReport::from_classes([
            ClassMetrics { class: Class::Background, iou: 0.995, precision: 1.0, recall: 1.0 },
            ClassMetrics { class: Class::Printed, iou: 0.643, precision: 1.0, recall: 1.0 },
            ClassMetrics { class: Class::Handwritten, iou: 0.326, precision: 1.0, recall: 1.0 },
        ]);
        assert!((r.miou - 0.655).abs() < 5e-4);
        assert!(r.to_table().contains("mIoU"));
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        assert!(confusion(&label(1, 2, &[0, 0]), &label(2, 1, &[0, 0])).is_err());
    }

    proptest! {
        #[test]
        fn iou_bounded_by_precision_and_recall(
            t in proptest::collection::vec(0u8..3, 64),
            p in proptest::collection::vec(0u8..3, 64),
            perm_seed in 0u64..1000,
        ) {
            let truth = label(8, 8, &t);
            let pred = label(8, 8, &p);
            let c = confusion(&pred, &truth).unwrap();
            prop_assert_eq!(c.total(), 64);
            let r = report(&c);
            for m in &r.classes {
                prop_assert!((0.0..=1.0).contains(&m.iou));
                prop_assert!(m.iou <= m.precision.min(m.recall) + 1e-12);
            }
            prop_assert!((r.miou - (r.classes[0].iou + r.classes[1].iou + r.classes[2].iou) / 3.0).abs() < 1e-15);

            // Same permutation of both images leaves everything unchanged.
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..64).collect();
            order.shuffle(&mut crate::rng::GenSeed(perm_seed).stream("perm"));
            let tp: Vec<u8> = order.iter().map(|&i| t[i]).collect();
            let pp: Vec<u8> = order.iter().map(|&i| p[i]).collect();
            prop_assert_eq!(confusion(&label(8, 8, &pp), &label(8, 8, &tp)).unwrap(), c);
        }
    }
}
