use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_forward, init_params, Checkpoint, ModelSpec, Parameters, TrainMeta};
use crate::error::{Error, Result};
use crate::harness::metrics::miou;
use crate::synthdata::{mix_seed, Dataset, Sample};
use crate::tensorcore::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        // lr = 0 is accepted as a sanity mode that leaves parameters untouched
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need learning_rate >= 0 and momentum in [0, 1), got {} and {}",
                self.learning_rate, self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Mean pixel cross-entropy and flat parameter gradient for one sample.
fn sample_gradient(params: &Parameters, spec: &ModelSpec, sample: &Sample) -> Result<(f64, Vec<f32>)> {
    let mut g = Graph::new();
    let input = g.leaf(sample.image.clone(), false);
    let (logits, nodes) = build_forward(&mut g, params, spec, input, true)?;
    let ce = g.pixel_cross_entropy(logits, &sample.labels.classes)?;
    let loss = g.mean(ce)?;
    g.backward(loss)?;
    let mut flat = Vec::with_capacity(params.count());
    for (k, b) in nodes.layers {
        for id in [k, b] {
            let grad = g.take_grad(id).expect("parameter leaves always receive a gradient");
            flat.extend_from_slice(grad.data());
        }
    }
    Ok((g.value(loss).data()[0] as f64, flat))
}

fn apply_flat(params: &mut Parameters, velocity: &[f32], lr: f32) {
    let mut offset = 0;
    for layer in &mut params.layers {
        for t in [&mut layer.kernel, &mut layer.bias] {
            let n = t.len();
            for (p, v) in t.data_mut().iter_mut().zip(&velocity[offset..offset + n]) {
                *p -= lr * v;
            }
            offset += n;
        }
    }
}

pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    train_with_progress(spec, train_set, eval_set, cfg, |_| {})
}

/// SGD with momentum (`v = mu * v + g; p -= lr * v`) on the mean pixel
/// cross-entropy of each mini-batch.
pub fn train_with_progress(
    spec: &ModelSpec,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    spec.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if spec.num_classes() != train_set.num_classes {
        return Err(Error::Config(format!(
            "model {} predicts {} classes, dataset has {}",
            spec.name,
            spec.num_classes(),
            train_set.num_classes
        )));
    }
    let mut params = init_params(cfg.seed, spec)?;
    let mut velocity = vec![0.0f32; params.count()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_gradient(&params, spec, &train_set.samples[i]))
                .collect::<Vec<_>>();
            let mut grad = vec![0.0f32; velocity.len()];
            let scale = 1.0 / batch.len() as f32;
            for r in results {
                let (loss, g) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = cfg.momentum * *v + g * scale;
            }
            apply_flat(&mut params, &velocity, cfg.learning_rate);
        }
        last_loss = epoch_loss / train_set.len() as f64;
        if !last_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: last_loss });
        }
        on_epoch(&EpochStats {
            epoch,
            mean_loss: last_loss,
        });
    }

    let eval_miou = match eval_set {
        Some(ds) if !ds.is_empty() => {
            let preds = ds
                .samples
                .par_iter()
                .map(|s| super::predict(&params, spec, &s.image))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<_> = ds.samples.iter().map(|s| s.labels.clone()).collect();
            miou(&preds, &labels, ds.num_classes)?
        }
        _ => f64::NAN,
    };

    Ok(Checkpoint {
        spec: spec.clone(),
        params,
        meta: TrainMeta {
            seed: cfg.seed,
            epochs: cfg.epochs as u32,
            final_train_loss: last_loss,
            eval_miou,
        },
    })
}
