//! Segmentation scoring: per-class confusion counts, intersection over
//! union, and report rendering.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IGNORE_INDEX;

/// Per-class pixel counts accumulated across images. Counting is exact
/// integer arithmetic; ratios only appear when a report is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: Vec<u64>,
    pub false_pos: Vec<u64>,
    pub false_neg: Vec<u64>,
    /// Pixels scored so far (ignore-labeled pixels excluded).
    pub evaluated_pixels: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            true_pos: vec![0; num_classes],
            false_pos: vec![0; num_classes],
            false_neg: vec![0; num_classes],
            evaluated_pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.true_pos.len()
    }

    /// Score one prediction against its ground truth. Ground-truth pixels
    /// labeled [`IGNORE_INDEX`] are skipped entirely.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::ShapeMismatch(format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let num_classes = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if g >= num_classes {
                return Err(Error::Dataset(format!(
                    "ground-truth label {g} exceeds the {num_classes}-class list"
                )));
            }
            if p >= num_classes {
                return Err(Error::Dataset(format!(
                    "predicted label {p} exceeds the {num_classes}-class list"
                )));
            }
            self.evaluated_pixels += 1;
            if p == g {
                self.true_pos[p] += 1;
            } else {
                self.false_pos[p] += 1;
                self.false_neg[g] += 1;
            }
        }
        Ok(())
    }

    /// Fold another accumulator into this one. Addition is commutative and
    /// associative on the integer counts, so merge order never matters.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "merging counts over {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for c in 0..self.num_classes() {
            self.true_pos[c] += other.true_pos[c];
            self.false_pos[c] += other.false_pos[c];
            self.false_neg[c] += other.false_neg[c];
        }
        self.evaluated_pixels += other.evaluated_pixels;
        Ok(())
    }

    /// IoU of one class, or `None` when the class appears in neither the
    /// predictions nor the ground truth (nothing to score).
    pub fn iou(&self, class: usize) -> Option<f64> {
        let union = self.true_pos[class] + self.false_pos[class] + self.false_neg[class];
        (union > 0).then(|| self.true_pos[class] as f64 / union as f64)
    }
}

/// Scored results for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over all evaluated classes, background included. `None`
    /// when nothing was evaluated (e.g. fully ignore-labeled ground truth).
    pub miou: Option<f64>,
    /// Mean IoU over evaluated foreground classes only, the number usually
    /// compared across publications.
    pub miou_foreground: Option<f64>,
    pub counts: ConfusionCounts,
    pub config_hash: String,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

impl SegReport {
    pub fn from_counts(
        counts: ConfusionCounts,
        class_names: Vec<String>,
        config_hash: String,
    ) -> Result<Self> {
        if class_names.len() != counts.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} class names for counts over {} classes",
                class_names.len(),
                counts.num_classes()
            )));
        }
        let per_class_iou: Vec<Option<f64>> =
            (0..counts.num_classes()).map(|c| counts.iou(c)).collect();
        let miou = mean(per_class_iou.iter().filter_map(|v| *v));
        let miou_foreground = mean(per_class_iou.iter().skip(1).filter_map(|v| *v));
        Ok(Self {
            class_names,
            per_class_iou,
            miou,
            miou_foreground,
            counts,
            config_hash,
        })
    }

    /// Render as CSV: one row per class, then the two summary rows, with
    /// `miou` always last. Unevaluated cells are left empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("class,tp,fp,fn,iou\n");
        for (c, name) in self.class_names.iter().enumerate() {
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                self.counts.true_pos[c],
                self.counts.false_pos[c],
                self.counts.false_neg[c],
                fmt(self.per_class_iou[c]),
            ));
        }
        out.push_str(&format!(
            "miou_foreground,,,,{}\n",
            fmt(self.miou_foreground)
        ));
        out.push_str(&format!("miou,,,,{}\n", fmt(self.miou)));
        out
    }

    /// Human-readable summary table for terminal output.
    pub fn render_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max("class".len());
        let mut out = format!("{:width$}  {:>10}\n", "class", "iou");
        for (c, name) in self.class_names.iter().enumerate() {
            match self.per_class_iou[c] {
                Some(iou) => out.push_str(&format!("{name:width$}  {iou:>10.4}\n")),
                None => out.push_str(&format!("{name:width$}  {:>10}\n", "-")),
            }
        }
        match self.miou {
            Some(miou) => out.push_str(&format!("{:width$}  {miou:>10.4}\n", "mean")),
            None => out.push_str(&format!("{:width$}  {:>10}\n", "mean", "-")),
        }
        if let Some(fg) = self.miou_foreground {
            out.push_str(&format!("{:width$}  {fg:>10.4}\n", "mean (fg)"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn iou_by_hand() {
        // gt [1,1,0,0] vs pred [1,1,1,1]: class 1 has tp=2 fp=2 fn=0 so
        // IoU 0.5; background has tp=0 fp=0 fn=2 so IoU 0; mean 0.25.
        let mut counts = ConfusionCounts::new(2);
        counts
            .accumulate(&arr2(&[[1u8, 1, 1, 1]]), &arr2(&[[1u8, 1, 0, 0]]))
            .unwrap();
        assert_eq!(counts.iou(1), Some(0.5));
        assert_eq!(counts.iou(0), Some(0.0));
        let report =
            SegReport::from_counts(counts, vec!["background".into(), "cat".into()], "h".into())
                .unwrap();
        assert_eq!(report.miou, Some(0.25));
        assert_eq!(report.miou_foreground, Some(0.5));
    }

    #[test]
    fn iou_ratios_are_exact_rationals() {
        // tp=1, fp=1, fn=1: IoU must be exactly the double 1/3.
        let mut counts = ConfusionCounts::new(2);
        counts
            .accumulate(&arr2(&[[1u8, 1, 0]]), &arr2(&[[1u8, 0, 1]]))
            .unwrap();
        assert_eq!(counts.iou(1), Some(1.0 / 3.0));
    }

    #[test]
    fn ignore_pixels_are_excluded() {
        let mut counts = ConfusionCounts::new(2);
        counts
            .accumulate(
                &arr2(&[[1u8, 0, 1]]),
                &arr2(&[[IGNORE_INDEX, IGNORE_INDEX, 1]]),
            )
            .unwrap();
        assert_eq!(counts.evaluated_pixels, 1);
        assert_eq!(counts.iou(1), Some(1.0));
        assert_eq!(counts.iou(0), None);
    }

    #[test]
    fn classes_absent_everywhere_are_excluded_from_the_mean() {
        let mut counts = ConfusionCounts::new(3);
        counts
            .accumulate(&arr2(&[[1u8, 0]]), &arr2(&[[1u8, 0]]))
            .unwrap();
        let report = SegReport::from_counts(
            counts,
            vec!["background".into(), "cat".into(), "dog".into()],
            "h".into(),
        )
        .unwrap();
        assert_eq!(report.per_class_iou[2], None);
        assert_eq!(report.miou, Some(1.0));
        assert_eq!(report.miou_foreground, Some(1.0));
    }

    #[test]
    fn fully_ignored_ground_truth_yields_no_score() {
        let mut counts = ConfusionCounts::new(2);
        counts
            .accumulate(&arr2(&[[0u8, 1]]), &arr2(&[[IGNORE_INDEX, IGNORE_INDEX]]))
            .unwrap();
        assert_eq!(counts.evaluated_pixels, 0);
        let report =
            SegReport::from_counts(counts, vec!["bg".into(), "cat".into()], "h".into()).unwrap();
        assert_eq!(report.miou, None);
        assert_eq!(report.to_csv().lines().last().unwrap(), "miou,,,,");
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let pred_a = arr2(&[[1u8, 2, 0]]);
        let gt_a = arr2(&[[1u8, 0, 0]]);
        let pred_b = arr2(&[[2u8, 2]]);
        let gt_b = arr2(&[[2u8, 1]]);

        let mut joint = ConfusionCounts::new(3);
        joint.accumulate(&pred_a, &gt_a).unwrap();
        joint.accumulate(&pred_b, &gt_b).unwrap();

        let mut left = ConfusionCounts::new(3);
        left.accumulate(&pred_a, &gt_a).unwrap();
        let mut right = ConfusionCounts::new(3);
        right.accumulate(&pred_b, &gt_b).unwrap();
        left.merge(&right).unwrap();

        assert_eq!(left, joint);
    }

    #[test]
    fn csv_schema_is_stable() {
        let mut counts = ConfusionCounts::new(2);
        counts
            .accumulate(&arr2(&[[1u8, 1, 1, 1]]), &arr2(&[[1u8, 1, 0, 0]]))
            .unwrap();
        let report = SegReport::from_counts(
            counts,
            vec!["background".into(), "cat".into()],
            "abc123".into(),
        )
        .unwrap();
        assert_eq!(
            report.to_csv(),
            "class,tp,fp,fn,iou\n\
             background,0,0,2,0.000000\n\
             cat,2,2,0,0.500000\n\
             miou_foreground,,,,0.500000\n\
             miou,,,,0.250000\n"
        );
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut counts = ConfusionCounts::new(2);
        assert!(matches!(
            counts.accumulate(&arr2(&[[5u8]]), &arr2(&[[1u8]])),
            Err(Error::Dataset(_))
        ));
        assert!(matches!(
            counts.accumulate(&arr2(&[[1u8]]), &arr2(&[[7u8]])),
            Err(Error::Dataset(_))
        ));
        assert!(matches!(
            counts.accumulate(&arr2(&[[1u8, 0]]), &arr2(&[[1u8]])),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
