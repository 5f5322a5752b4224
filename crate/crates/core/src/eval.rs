//! Confusion-matrix accumulation, per-class IoU and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Image, LabelMap, ModelParams};
use crate::IGNORE;

/// `C×C` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one `(prediction, ground truth)` pair; ground-truth IGNORE
    /// pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Argument(format!(
                    "label pair ({g}, {p}) out of range for {c} classes"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let included: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if included.is_empty() {
            None
        } else {
            Some(included.iter().sum::<f64>() / included.len() as f64)
        };
        IouReport { per_class, miou }
    }
}

/// Per-class IoU (`None` where intersection and union are both empty) and
/// the unweighted mean over the classes that have a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

/// Convenience: mIoU over a list of prediction/ground-truth pairs.
pub fn evaluate_pairs<'a>(
    num_classes: usize,
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in pairs {
        cm.accumulate(p, g)?;
    }
    Ok(cm.iou())
}

/// Runs the network on every image and scores its argmax predictions.
pub fn evaluate_model(params: &ModelParams, images: &[Image], labels: &[LabelMap]) -> Result<IouReport> {
    if images.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} images but {} label maps",
            images.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(params.arch.num_classes);
    for (im, gt) in images.iter().zip(labels) {
        let pred = model::predict(&model::forward_scores(params, im)?);
        cm.accumulate(&pred, gt)?;
    }
    Ok(cm.iou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new(2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let m = map(&[0, 1, 1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.get(0, 0) + cm.get(1, 1), 4);
        let r = cm.iou();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn worked_two_by_two() {
        let pred = map(&[0, 0, 1, 1]);
        let gt = map(&[0, 1, 1, 1]);
        let r = evaluate_pairs(2, [(&pred, &gt)]).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou.unwrap() - 0.583_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn ignored_ground_truth_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(&[0, 1, 2, 0]), &LabelMap::filled(2, 2, IGNORE)).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let m = map(&[0, 0, 1, 1]);
        let r = evaluate_pairs(3, [(&m, &m)]).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn size_mismatch_is_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&map(&[0; 4]), &LabelMap::filled(1, 4, 0)).is_err());
    }

    fn maps(n: usize, c: u8) -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (prop::collection::vec(0..c, n), prop::collection::vec(0..c, n))
            .prop_map(move |(a, b)| (LabelMap::new(1, n, a).unwrap(), LabelMap::new(1, n, b).unwrap()))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_in_prediction_and_truth((a, b) in maps(20, 4)) {
            let ab = evaluate_pairs(4, [(&a, &b)]).unwrap();
            let ba = evaluate_pairs(4, [(&b, &a)]).unwrap();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn relabelling_permutes_scores((a, b) in maps(20, 3), shift in 1u8..3) {
            let perm = |m: &LabelMap| LabelMap::new(1, 20, m.labels.iter().map(|v| (v + shift) % 3).collect()).unwrap();
            let r = evaluate_pairs(3, [(&a, &b)]).unwrap();
            let rp = evaluate_pairs(3, [(&perm(&a), &perm(&b))]).unwrap();
            for k in 0..3 {
                prop_assert_eq!(r.per_class[k], rp.per_class[(k + shift as usize) % 3]);
            }
        }

        #[test]
        fn merge_equals_joint_accumulation((a, b) in maps(12, 3), (c, d) in maps(12, 3)) {
            let mut x = ConfusionMatrix::new(3);
            x.accumulate(&a, &b).unwrap();
            let mut y = ConfusionMatrix::new(3);
            y.accumulate(&c, &d).unwrap();
            x.merge(&y).unwrap();
            let mut z = ConfusionMatrix::new(3);
            z.accumulate(&a, &b).unwrap();
            z.accumulate(&c, &d).unwrap();
            prop_assert_eq!(x.total(), 24);
            prop_assert_eq!(x, z);
        }
    }
}
