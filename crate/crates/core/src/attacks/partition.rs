use crate::error::{Error, Result};
use crate::synthdata::LabelMap;
use crate::tensorcore::{argmax_channels, Tensor};

const CLEAN_PROB_FLOOR: f64 = 1e-12;

/// Two complementary pixel masks over an `H x W` map.
///
/// After correctness partitioning `a` is the correctly classified set and
/// `b` the rest; after KL partitioning `a` is the high-divergence set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelPartition {
    pub height: usize,
    pub width: usize,
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
}

impl PixelPartition {
    fn from_predicate(height: usize, width: usize, in_a: impl Iterator<Item = bool>) -> Self {
        let mask_a: Vec<bool> = in_a.collect();
        let mask_b = mask_a.iter().map(|&a| !a).collect();
        Self {
            height,
            width,
            mask_a,
            mask_b,
        }
    }

    pub fn count_a(&self) -> usize {
        self.mask_a.iter().filter(|&&m| m).count()
    }

    pub fn count_b(&self) -> usize {
        self.mask_b.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_a.is_empty()
    }

    /// Masks are disjoint and cover every pixel.
    pub fn is_total(&self) -> bool {
        self.mask_a.len() == self.height * self.width
            && self.mask_b.len() == self.mask_a.len()
            && self.mask_a.iter().zip(&self.mask_b).all(|(&a, &b)| a != b)
    }
}

/// `a` = pixels whose argmax (ties to the lowest class) equals the label.
pub fn partition_by_correctness(logits: &Tensor, labels: &LabelMap) -> Result<PixelPartition> {
    let (_, h, w) = logits.dims3()?;
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::shape(
            "partition_by_correctness",
            format!("logits {h}x{w} vs labels {}x{}", labels.height, labels.width),
        ));
    }
    let pred = argmax_channels(logits)?;
    Ok(PixelPartition::from_predicate(
        h,
        w,
        pred.iter().zip(&labels.classes).map(|(p, y)| p == y),
    ))
}

/// Per-pixel KL divergence of the adversarial prediction from the clean one.
#[derive(Clone, Debug, PartialEq)]
pub struct KlMap {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
    mean: f64,
}

impl KlMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::shape(
                "kl map",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        // offsets from the minimum keep the mean of a constant map exact
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = min + values.iter().map(|v| v - min).sum::<f64>() / values.len() as f64;
        Ok(Self {
            height,
            width,
            values,
            mean,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }
}

fn log_softmax_column(col: &[f64], out: &mut [f64]) {
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + col.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(col) {
        *o = z - lse;
    }
}

/// `KL(softmax(adv) || softmax(clean))` at every pixel, in 64-bit.
///
/// Terms with zero adversarial probability contribute nothing and clean
/// probabilities are floored at `1e-12`.
pub fn pixel_kl(logits_adv: &Tensor, logits_clean: &Tensor) -> Result<KlMap> {
    if logits_adv.shape() != logits_clean.shape() {
        return Err(Error::shape(
            "pixel_kl",
            format!("{:?} vs {:?}", logits_adv.shape(), logits_clean.shape()),
        ));
    }
    let (m, h, w) = logits_adv.dims3()?;
    let plane = h * w;
    let (za, zc) = (logits_adv.data(), logits_clean.data());
    let log_floor = CLEAN_PROB_FLOOR.ln();
    let mut col_a = vec![0.0; m];
    let mut col_c = vec![0.0; m];
    let mut la = vec![0.0; m];
    let mut lc = vec![0.0; m];
    let mut values = Vec::with_capacity(plane);
    for p in 0..plane {
        let mut identical = true;
        for c in 0..m {
            let (a, b) = (za[c * plane + p], zc[c * plane + p]);
            identical &= a.to_bits() == b.to_bits();
            col_a[c] = a as f64;
            col_c[c] = b as f64;
        }
        if identical {
            values.push(0.0);
            continue;
        }
        log_softmax_column(&col_a, &mut la);
        log_softmax_column(&col_c, &mut lc);
        let mut kl = 0.0;
        for c in 0..m {
            let pa = la[c].exp();
            if pa == 0.0 {
                continue;
            }
            kl += pa * (la[c] - lc[c].max(log_floor));
        }
        values.push(kl);
    }
    KlMap::new(h, w, values)
}

/// `a` = pixels strictly above the mean divergence, `b` = the rest.
pub fn partition_by_kl(kl: &KlMap) -> PixelPartition {
    let mean = kl.mean();
    PixelPartition::from_predicate(kl.height, kl.width, kl.values.iter().map(|&v| v > mean))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn labels(classes: Vec<u16>, w: usize) -> LabelMap {
        LabelMap::new(classes.len() / w, w, classes).unwrap()
    }

    fn onehot_logits(classes: &[u16], m: usize, h: usize, w: usize) -> Tensor {
        let plane = h * w;
        Tensor::from_fn(&[m, h, w], |i| {
            if classes[i % plane] as usize == i / plane {
                5.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn perfect_prediction_has_no_false_pixels() {
        let y = labels(vec![0, 1, 2, 1, 0, 2], 3);
        let part = partition_by_correctness(&onehot_logits(&y.classes, 3, 2, 3), &y).unwrap();
        assert_eq!(part.count_b(), 0);
        assert!(part.is_total());
    }

    #[test]
    fn shifted_labels_have_no_true_pixels() {
        let y = labels(vec![0, 1, 2, 1, 0, 2], 3);
        let shifted: Vec<u16> = y.classes.iter().map(|c| (c + 1) % 3).collect();
        let part = partition_by_correctness(&onehot_logits(&shifted, 3, 2, 3), &y).unwrap();
        assert_eq!(part.count_a(), 0);
    }

    #[test]
    fn correctness_matches_scalar_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-2.0..2.0));
        let y = labels((0..16).map(|_| rng.gen_range(0..3)).collect(), 4);
        let part = partition_by_correctness(&logits, &y).unwrap();
        for p in 0..16 {
            let col: Vec<f32> = (0..3).map(|c| logits.data()[c * 16 + p]).collect();
            let mut best = 0;
            for c in 1..3 {
                if col[c] > col[best] {
                    best = c;
                }
            }
            assert_eq!(part.mask_a[p], best == y.classes[p] as usize);
        }
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-30.0..30.0));
        let kl = pixel_kl(&z, &z).unwrap();
        assert!(kl.values().iter().all(|&v| v == 0.0));
        assert_eq!(kl.mean(), 0.0);
    }

    #[test]
    fn kl_two_class_value() {
        // adv probs (0.9, 0.1), clean (0.5, 0.5)
        let adv = Tensor::new(vec![2, 1, 1], vec![(9.0f64).ln() as f32, 0.0]).unwrap();
        let clean = Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap();
        let kl = pixel_kl(&adv, &clean).unwrap();
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl.values()[0] - expect).abs() < 1e-6);
        assert!((kl.values()[0] - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn kl_handles_saturated_probabilities() {
        let adv = Tensor::new(vec![2, 1, 1], vec![0.0, 2000.0]).unwrap();
        let clean = Tensor::new(vec![2, 1, 1], vec![2000.0, 0.0]).unwrap();
        let kl = pixel_kl(&adv, &clean).unwrap();
        // clean probability of class 1 is floored at 1e-12
        assert!((kl.values()[0] - (1e12f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn constant_kl_map_has_empty_high_set() {
        let kl = KlMap::new(4, 4, vec![0.1; 16]).unwrap();
        let part = partition_by_kl(&kl);
        assert_eq!(part.count_a(), 0);
        assert!(part.is_total());
    }

    #[test]
    fn single_hot_pixel() {
        let mut v = vec![0.0; 12];
        v[5] = 2.0;
        let part = partition_by_kl(&KlMap::new(3, 4, v).unwrap());
        assert_eq!(part.count_a(), 1);
        assert!(part.mask_a[5]);
    }

    #[test]
    fn shape_mismatches() {
        assert!(pixel_kl(&Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[3, 2, 2])).is_err());
        let y = labels(vec![0; 6], 3);
        assert!(partition_by_correctness(&Tensor::zeros(&[2, 3, 3]), &y).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(seed in any::<u64>(), scale in 0.1f32..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-scale..scale));
            let b = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-scale..scale));
            let kl = pixel_kl(&a, &b).unwrap();
            prop_assert!(kl.values().iter().all(|&v| v >= -1e-7));
            let naive = kl.values().iter().sum::<f64>() / 9.0;
            prop_assert!((kl.mean() - naive).abs() < 1e-12 * (1.0 + naive.abs()));
        }

        #[test]
        fn kl_partition_matches_threshold(values in proptest::collection::vec(0.0f64..3.0, 1..40)) {
            let n = values.len();
            let kl = KlMap::new(1, n, values.clone()).unwrap();
            let part = partition_by_kl(&kl);
            prop_assert!(part.is_total());
            for i in 0..n {
                prop_assert_eq!(part.mask_a[i], values[i] > kl.mean());
            }
        }
    }
}
