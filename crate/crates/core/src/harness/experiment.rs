use std::collections::HashMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use super::metrics::ConfusionMatrix;
use crate::attacks::{run_attack, AttackConfig, Mode, Transform};
use crate::error::{Error, Result};
use crate::models::Checkpoint;
use crate::synthdata::{mix_seed, LabelMap, Sample};

/// Forward every sample, take the per-pixel argmax and return
/// `(mIoU, pixel accuracy)` over all pixels.
pub fn evaluate_model(ckpt: &Checkpoint, samples: &[Sample]) -> Result<(f64, f64)> {
    let preds = samples
        .par_iter()
        .map(|s| ckpt.predict(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.labels).collect();
    score(&preds, &labels, ckpt.spec.num_classes())
}

fn score(preds: &[LabelMap], labels: &[&LabelMap], num_classes: usize) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::Empty("evaluation needs at least one sample"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in preds.iter().zip(labels) {
        cm.add(p, t)?;
    }
    Ok((cm.mean_iou()?, cm.pixel_accuracy()?))
}

/// Adversarial mIoU of one target for one seed, or the reason the cell failed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub adv_miou: std::result::Result<f64, String>,
}

/// One (attack, target) entry of the transfer matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRecord {
    pub source: String,
    pub attack: String,
    pub config_hash: String,
    pub target: String,
    pub clean_miou: f64,
    pub outcomes: Vec<SeedOutcome>,
}

impl TransferRecord {
    pub fn seeds(&self) -> Vec<u64> {
        self.outcomes.iter().map(|o| o.seed).collect()
    }

    /// Adversarial mIoU of the seeds that completed.
    pub fn values(&self) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter_map(|o| o.adv_miou.as_ref().ok().copied())
            .collect()
    }

    /// Median over completed seeds; `None` if every seed failed.
    pub fn median(&self) -> Option<f64> {
        median(&self.values())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Perturbation statistics of one (attack, seed) cell over every eval sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub attack: String,
    pub seed: u64,
    pub status: std::result::Result<(), String>,
    pub max_linf: f32,
    pub min_value: f32,
    pub max_value: f32,
}

/// Per-iteration averages over every sample and completed seed of one attack.
#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
    /// Mean stage flag (0 uniform, 1 correctness, 2 divergence).
    pub stage: f64,
    pub misclassified: f64,
    pub mean_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrace {
    pub attack: String,
    pub points: Vec<TracePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub dataset_id: String,
    pub source: String,
    /// Source first, then targets, in evaluation order.
    pub models: Vec<String>,
    /// Attack names in row order.
    pub attacks: Vec<String>,
    pub records: Vec<TransferRecord>,
    pub cells: Vec<CellStats>,
    pub traces: Vec<AttackTrace>,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
}

impl TransferReport {
    pub fn record(&self, attack: &str, target: &str) -> Option<&TransferRecord> {
        self.records.iter().find(|r| r.attack == attack && r.target == target)
    }

    pub fn median(&self, attack: &str, target: &str) -> Option<f64> {
        self.record(attack, target).and_then(TransferRecord::median)
    }

    pub fn clean_miou(&self, target: &str) -> Option<f64> {
        self.records.iter().find(|r| r.target == target).map(|r| r.clean_miou)
    }

    /// Models other than the source.
    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.models
            .iter()
            .map(String::as_str)
            .filter(move |m| *m != self.source)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Stable identifier of an evaluation set.
pub fn dataset_id(samples: &[Sample]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        for v in s.image.data() {
            feed(&v.to_bits().to_le_bytes());
        }
        for c in &s.labels.classes {
            feed(&c.to_le_bytes());
        }
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug)]
struct CellResult {
    /// Adversarial mIoU per evaluated model, in `Experiment::models` order.
    adv: std::result::Result<Vec<f64>, String>,
    max_linf: f32,
    range: (f32, f32),
    /// Per-iteration sums over samples: loss, stage flag, misclassified, KL.
    trace: Vec<[f64; 4]>,
    runs: usize,
}

/// Source model, evaluated models and eval set shared by several attack
/// grids. Cells are cached by attack fingerprint and seed, so a grid that
/// repeats an attack already run reuses its results.
pub struct Experiment<'a> {
    models: Vec<&'a Checkpoint>,
    samples: &'a [Sample],
    seeds: Vec<u64>,
    clean: Vec<f64>,
    dataset_id: String,
    cache: HashMap<(String, u64), CellResult>,
}

impl<'a> Experiment<'a> {
    /// `targets` may include the source; duplicates by name are evaluated once.
    pub fn new(
        source: &'a Checkpoint,
        targets: &[&'a Checkpoint],
        samples: &'a [Sample],
        seeds: &[u64],
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Input("transfer experiment needs at least one target".into()));
        }
        if samples.is_empty() {
            return Err(Error::Empty("transfer experiment needs eval samples"));
        }
        if seeds.is_empty() {
            return Err(Error::Empty("transfer experiment needs at least one seed"));
        }
        let mut models = vec![source];
        for &t in targets {
            if t.spec.input_channels != source.spec.input_channels || t.spec.num_classes() != source.spec.num_classes()
            {
                return Err(Error::shape(
                    "transfer experiment",
                    format!(
                        "model {} has {} inputs / {} classes, source {} has {} / {}",
                        t.name(),
                        t.spec.input_channels,
                        t.spec.num_classes(),
                        source.name(),
                        source.spec.input_channels,
                        source.spec.num_classes()
                    ),
                ));
            }
            if !models.iter().any(|m| m.name() == t.name()) {
                models.push(t);
            }
        }
        let clean = models
            .iter()
            .map(|m| evaluate_model(m, samples).map(|(miou, _)| miou))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models,
            samples,
            seeds: seeds.to_vec(),
            clean,
            dataset_id: dataset_id(samples),
            cache: HashMap::new(),
        })
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name().to_string()).collect()
    }

    pub fn clean_miou(&self) -> &[f64] {
        &self.clean
    }

    fn cell_key(cfg: &AttackConfig, seed: u64) -> (String, u64) {
        let canonical = AttackConfig { seed: 0, ..cfg.clone() };
        (canonical.fingerprint(), seed)
    }

    fn run_cell(&self, cfg: &AttackConfig, seed: u64) -> CellResult {
        let source = self.models[0];
        let mut trace = vec![[0.0f64; 4]; cfg.iterations];
        let mut max_linf = 0.0f32;
        let mut range = (f32::INFINITY, f32::NEG_INFINITY);
        let attacked = self
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let per_sample = AttackConfig {
                    seed: mix_seed(seed, i as u64),
                    ..cfg.clone()
                };
                run_attack(source, &s.image, &s.labels, &per_sample).map_err(|e| format!("sample {i}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, String>>();
        let adv = attacked.and_then(|results| {
            for r in &results {
                max_linf = max_linf.max(r.max_linf);
                range = (range.0.min(r.value_range.0), range.1.max(r.value_range.1));
                for (acc, e) in trace.iter_mut().zip(&r.log) {
                    acc[0] += e.loss;
                    acc[1] += e.stage.flag() as f64;
                    acc[2] += e.misclassified;
                    acc[3] += e.mean_kl;
                }
            }
            let labels: Vec<&LabelMap> = self.samples.iter().map(|s| &s.labels).collect();
            self.models
                .iter()
                .map(|m| {
                    let preds = results
                        .par_iter()
                        .map(|r| m.predict(&r.x_adv))
                        .collect::<Result<Vec<_>>>()?;
                    score(&preds, &labels, m.spec.num_classes()).map(|(miou, _)| miou)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| format!("evaluation: {e}"))
        });
        let runs = if adv.is_ok() { self.samples.len() } else { 0 };
        CellResult {
            adv,
            max_linf,
            range,
            trace,
            runs,
        }
    }

    /// Runs every (attack, seed) cell not already cached and assembles the
    /// report for `cfgs` in the given order.
    pub fn run(&mut self, cfgs: &[AttackConfig]) -> Result<TransferReport> {
        let started = unix_now();
        let mut names = Vec::new();
        for c in cfgs {
            if names.contains(&c.name) {
                return Err(Error::Config(format!("attack name {} used twice", c.name)));
            }
            names.push(c.name.clone());
        }
        let mut pending: Vec<(&AttackConfig, u64)> = Vec::new();
        for cfg in cfgs {
            for &seed in &self.seeds {
                let key = Self::cell_key(cfg, seed);
                if !self.cache.contains_key(&key) && !pending.iter().any(|(c, s)| Self::cell_key(c, *s) == key) {
                    pending.push((cfg, seed));
                }
            }
        }
        let this = &*self;
        let fresh: Vec<CellResult> = pending
            .par_iter()
            .map(|(cfg, seed)| this.run_cell(cfg, *seed))
            .collect();
        for ((cfg, seed), r) in pending.iter().zip(fresh) {
            self.cache.insert(Self::cell_key(cfg, *seed), r);
        }
        Ok(self.assemble(cfgs, started))
    }

    fn assemble(&self, cfgs: &[AttackConfig], started: u64) -> TransferReport {
        let source = self.models[0].name().to_string();
        let mut records = Vec::new();
        let mut cells = Vec::new();
        let mut traces = Vec::new();
        for cfg in cfgs {
            let hash = AttackConfig { seed: 0, ..cfg.clone() }.fingerprint();
            let results: Vec<&CellResult> = self
                .seeds
                .iter()
                .map(|&s| &self.cache[&Self::cell_key(cfg, s)])
                .collect();
            for (mi, model) in self.models.iter().enumerate() {
                records.push(TransferRecord {
                    source: source.clone(),
                    attack: cfg.name.clone(),
                    config_hash: hash.clone(),
                    target: model.name().to_string(),
                    clean_miou: self.clean[mi],
                    outcomes: self
                        .seeds
                        .iter()
                        .zip(&results)
                        .map(|(&seed, r)| SeedOutcome {
                            seed,
                            adv_miou: r.adv.as_ref().map(|v| v[mi]).map_err(Clone::clone),
                        })
                        .collect(),
                });
            }
            for (&seed, r) in self.seeds.iter().zip(&results) {
                cells.push(CellStats {
                    attack: cfg.name.clone(),
                    seed,
                    status: r.adv.as_ref().map(|_| ()).map_err(Clone::clone),
                    max_linf: r.max_linf,
                    min_value: r.range.0,
                    max_value: r.range.1,
                });
            }
            let runs: usize = results.iter().map(|r| r.runs).sum();
            if runs > 0 {
                let points = (0..cfg.iterations)
                    .map(|t| {
                        let mut acc = [0.0f64; 4];
                        for r in results.iter().filter(|r| r.runs > 0) {
                            for k in 0..4 {
                                acc[k] += r.trace[t][k];
                            }
                        }
                        let n = runs as f64;
                        TracePoint {
                            iteration: t,
                            loss: acc[0] / n,
                            stage: acc[1] / n,
                            misclassified: acc[2] / n,
                            mean_kl: acc[3] / n,
                        }
                    })
                    .collect();
                traces.push(AttackTrace {
                    attack: cfg.name.clone(),
                    points,
                });
            }
        }
        TransferReport {
            dataset_id: self.dataset_id.clone(),
            source,
            models: self.model_names(),
            attacks: cfgs.iter().map(|c| c.name.clone()).collect(),
            records,
            cells,
            traces,
            started,
            finished: unix_now(),
        }
    }

    pub fn transfer(&mut self, cfgs: &[AttackConfig]) -> Result<TransferReport> {
        self.run(cfgs)
    }

    pub fn ablation(&mut self, base: &AttackConfig) -> Result<TransferReport> {
        self.run(&ablation_configs(base))
    }
}

/// The four-row grid: neither stage (plain PGD), each stage alone, and both.
/// The stage-1 row uses the rising weight schedule, so it coincides with the
/// correctness-weighted baseline.
pub fn ablation_configs(base: &AttackConfig) -> Vec<AttackConfig> {
    let base = AttackConfig {
        transform: Transform::None,
        ..base.clone()
    };
    vec![
        base.clone().with_mode("pgd", Mode::Pgd),
        AttackConfig {
            gamma: None,
            ..base.clone().with_mode("stage1_only", Mode::Stage1Only)
        },
        base.clone().with_mode("stage2_only", Mode::Stage2Only),
        base.with_mode("two_stage", Mode::TwoStage),
    ]
}

/// Attacks every eval sample on `source` for each config and seed and
/// evaluates the source plus every target on the results.
pub fn run_transfer_experiment(
    source: &Checkpoint,
    targets: &[&Checkpoint],
    attack_cfgs: &[AttackConfig],
    eval_samples: &[Sample],
    seeds: &[u64],
) -> Result<TransferReport> {
    Experiment::new(source, targets, eval_samples, seeds)?.transfer(attack_cfgs)
}

/// [`ablation_configs`] of `base` evaluated like [`run_transfer_experiment`].
pub fn run_ablation(
    source: &Checkpoint,
    targets: &[&Checkpoint],
    eval_samples: &[Sample],
    seeds: &[u64],
    base: &AttackConfig,
) -> Result<TransferReport> {
    Experiment::new(source, targets, eval_samples, seeds)?.ablation(base)
}
