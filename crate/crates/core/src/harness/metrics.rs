use crate::error::{Error, Result};
use crate::synthdata::LabelMap;

/// Pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::shape(
                "confusion matrix",
                format!(
                    "prediction {}x{} vs labels {}x{}",
                    pred.height, pred.width, truth.height, truth.width
                ),
            ));
        }
        let m = self.num_classes;
        for (&p, &t) in pred.classes.iter().zip(&truth.classes) {
            let (p, t) = (p as usize, t as usize);
            if p >= m || t >= m {
                return Err(Error::Input(format!("class index {} out of range for {m}", p.max(t))));
            }
            self.counts[t * m + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class appears in neither prediction
    /// nor ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let m = self.num_classes;
        (0..m)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..m).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..m).map(|i| self.get(i, c)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Empty("no pixels evaluated"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("no pixels evaluated"));
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }
}

/// Mean IoU accumulated over every pixel of every sample.
pub fn miou(preds: &[LabelMap], labels: &[LabelMap], num_classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("miou needs at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "miou",
            format!("{} predictions vs {} label maps", preds.len(), labels.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in preds.iter().zip(labels) {
        cm.add(p, t)?;
    }
    cm.mean_iou()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn map(classes: Vec<u16>, w: usize) -> LabelMap {
        LabelMap::new(classes.len() / w, w, classes).unwrap()
    }

    /// Per-class pixel sets, intersected and unioned directly.
    fn set_oracle(preds: &[LabelMap], labels: &[LabelMap], m: usize) -> f64 {
        let mut ious = Vec::new();
        for c in 0..m as u16 {
            let mut pred_set = HashSet::new();
            let mut true_set = HashSet::new();
            for (s, (p, t)) in preds.iter().zip(labels).enumerate() {
                for i in 0..p.classes.len() {
                    if p.classes[i] == c {
                        pred_set.insert((s, i));
                    }
                    if t.classes[i] == c {
                        true_set.insert((s, i));
                    }
                }
            }
            let union = pred_set.union(&true_set).count();
            if union > 0 {
                ious.push(pred_set.intersection(&true_set).count() as f64 / union as f64);
            }
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    #[test]
    fn perfect_prediction() {
        let l = map(vec![0, 1, 2, 1, 0, 3], 3);
        assert_eq!(miou(&[l.clone()], &[l], 4).unwrap(), 1.0);
    }

    #[test]
    fn constant_prediction_two_classes() {
        let truth = map(vec![0, 0, 1, 1], 2);
        let pred = map(vec![0, 0, 0, 0], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&pred, &truth).unwrap();
        assert_eq!(cm.iou(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.mean_iou().unwrap(), 0.25);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let l = map(vec![0, 1], 2);
        assert_eq!(miou(&[l.clone()], &[l], 10).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(miou(&[], &[], 2).is_err());
        let a = map(vec![0, 1], 2);
        let b = map(vec![0, 1, 1, 0], 2);
        assert!(miou(&[a.clone()], &[b], 2).is_err());
        assert!(miou(&[a.clone(), a.clone()], &[a], 2).is_err());
    }

    fn instance(m: u16, n: usize, len: usize) -> impl Strategy<Value = (Vec<LabelMap>, Vec<LabelMap>)> {
        let one = proptest::collection::vec(0..m, len).prop_map(move |v| map(v, len));
        (
            proptest::collection::vec(one.clone(), n),
            proptest::collection::vec(one, n),
        )
    }

    proptest! {
        #[test]
        fn matches_set_oracle((p, t) in instance(4, 3, 12)) {
            let fast = miou(&p, &t, 4).unwrap();
            let slow = set_oracle(&p, &t, 4);
            prop_assert!((fast - slow).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn permutation_invariant((p, t) in instance(3, 4, 6)) {
            let a = miou(&p, &t, 3).unwrap();
            let rp: Vec<_> = p.iter().rev().cloned().collect();
            let rt: Vec<_> = t.iter().rev().cloned().collect();
            prop_assert_eq!(a, miou(&rp, &rt, 3).unwrap());
        }
    }
}
