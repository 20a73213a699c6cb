use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AttackConfig, Mode, Transform};
use super::loss::{stage1_weights, stage2_weights, uniform_weights};
use super::partition::{partition_by_correctness, partition_by_kl, pixel_kl};
use super::step::{gaussian_kernel, gradient_transform, lookahead, pgd_step, step_size_schedule, TransformState};
use crate::error::{Error, Result};
use crate::models::{build_forward, Checkpoint};
use crate::synthdata::LabelMap;
use crate::tensorcore::{Graph, Tensor};

/// Which objective an iteration used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Unweighted mean cross-entropy.
    Uniform,
    /// Correctness-weighted.
    Correctness,
    /// KL-weighted.
    Divergence,
}

impl Stage {
    /// 0, 1 or 2, as written to logs.
    pub fn flag(self) -> u8 {
        match self {
            Stage::Uniform => 0,
            Stage::Correctness => 1,
            Stage::Divergence => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Fraction of pixels misclassified at the point the gradient was taken.
    pub misclassified: f64,
    pub mean_kl: f64,
    /// `||x_adv - x||_inf` after the step.
    pub linf: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvResult {
    pub x_adv: Tensor,
    pub log: Vec<IterationLog>,
    pub prediction: LabelMap,
    /// Largest distance from `x` over the initial point and every iterate.
    pub max_linf: f32,
    /// Smallest and largest pixel value over every iterate.
    pub value_range: (f32, f32),
}

fn choose_stage(cfg: &AttackConfig, t: usize, correct: usize, wrong: usize) -> Stage {
    match cfg.mode {
        Mode::Pgd => Stage::Uniform,
        Mode::Stage1Only => Stage::Correctness,
        Mode::Stage2Only => Stage::Divergence,
        Mode::TwoStage => {
            if cfg.fallback_iteration().is_some_and(|f| t >= f) {
                return Stage::Divergence;
            }
            let stage_one = if cfg.strict_switch_condition {
                wrong > 0
            } else {
                correct > 0
            };
            if stage_one {
                Stage::Correctness
            } else {
                Stage::Divergence
            }
        }
    }
}

fn update_range(range: &mut (f32, f32), t: &Tensor) {
    for &v in t.data() {
        range.0 = range.0.min(v);
        range.1 = range.1.max(v);
    }
}

/// Iterative sign-gradient attack on one image, dispatching the per-iteration
/// objective by `cfg.mode`.
pub fn run_attack(ckpt: &Checkpoint, x: &Tensor, y: &LabelMap, cfg: &AttackConfig) -> Result<AdvResult> {
    run_attack_observed(ckpt, x, y, cfg, |_, _| {})
}

/// As [`run_attack`], calling `observe(t, x_adv)` with the initial point
/// (`t = 0`) and after every step (`t = 1..=N`).
pub fn run_attack_observed(
    ckpt: &Checkpoint,
    x: &Tensor,
    y: &LabelMap,
    cfg: &AttackConfig,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<AdvResult> {
    cfg.validate()?;
    let (_, h, w) = x.dims3()?;
    if (h, w) != (y.height, y.width) {
        return Err(Error::shape(
            "run_attack",
            format!("image {h}x{w} vs labels {}x{}", y.height, y.width),
        ));
    }
    let clean_logits = ckpt.forward(x).map_err(|e| match e {
        Error::NonFinite(what) => Error::Attack {
            iteration: 0,
            reason: format!("non-finite value in clean {what}"),
        },
        other => other,
    })?;
    let n = cfg.iterations;
    let eps = cfg.epsilon;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x_adv = Tensor::from_fn(x.shape(), |i| {
        let u = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
        (x.data()[i] + u).clamp(0.0, 1.0)
    });
    observe(0, &x_adv);
    let mut max_linf = x_adv.linf_distance(x);
    let mut range = (f32::INFINITY, f32::NEG_INFINITY);
    update_range(&mut range, &x_adv);

    let ti_kernel = gaussian_kernel(cfg.ti_kernel_size, cfg.ti_sigma);
    let mut state = TransformState::new(x.shape());
    let mut log = Vec::with_capacity(n);

    for t in 0..n {
        let alpha = step_size_schedule(t, n, cfg);
        let probe = match cfg.transform {
            Transform::Nesterov => lookahead(&x_adv, &state, alpha, cfg.momentum_decay)?,
            _ => x_adv.clone(),
        };
        let fail = |e: Error| match e {
            Error::NonFinite(what) => Error::Attack {
                iteration: t,
                reason: format!("non-finite value in {what}"),
            },
            other => other,
        };

        let mut g = Graph::new();
        let input = g.leaf(probe, true);
        let (logits, _) = build_forward(&mut g, &ckpt.params, &ckpt.spec, input, false).map_err(fail)?;
        let ce = g.pixel_cross_entropy(logits, &y.classes).map_err(fail)?;

        let correctness = partition_by_correctness(g.value(logits), y)?;
        let kl = pixel_kl(g.value(logits), &clean_logits)?;
        let (correct, wrong) = (correctness.count_a(), correctness.count_b());
        let stage = choose_stage(cfg, t, correct, wrong);
        let weights = match stage {
            Stage::Uniform => uniform_weights(h, w),
            Stage::Correctness => stage1_weights(&correctness, cfg.gamma_at(t)),
            Stage::Divergence => stage2_weights(&partition_by_kl(&kl), cfg.beta as f64),
        };
        let loss = g.weighted_sum(ce, weights).map_err(fail)?;
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Attack {
                iteration: t,
                reason: format!("loss is {loss_value}"),
            });
        }
        g.backward(loss)?;
        let grad = g
            .take_grad(input)
            .ok_or_else(|| Error::Contract("input gradient missing after backward".into()))?;
        if !grad.is_finite() {
            return Err(Error::Attack {
                iteration: t,
                reason: "non-finite input gradient".into(),
            });
        }

        let (direction, next) = gradient_transform(
            grad,
            state,
            cfg.transform,
            cfg.momentum_decay,
            &ti_kernel,
            cfg.ti_kernel_size,
        )?;
        state = next;
        x_adv = pgd_step(&x_adv, &direction, alpha, eps, x)?;
        observe(t + 1, &x_adv);

        let linf = x_adv.linf_distance(x);
        max_linf = max_linf.max(linf);
        update_range(&mut range, &x_adv);
        log.push(IterationLog {
            iteration: t,
            stage,
            loss: loss_value,
            misclassified: wrong as f64 / (h * w) as f64,
            mean_kl: kl.mean(),
            linf,
        });
    }

    let prediction = ckpt.predict(&x_adv)?;
    Ok(AdvResult {
        x_adv,
        log,
        prediction,
        max_linf,
        value_range: range,
    })
}

/// Correctness-weighted attack with the `t / (2N)` weight schedule at every
/// iteration.
pub fn segpgd_baseline(ckpt: &Checkpoint, x: &Tensor, y: &LabelMap, cfg: &AttackConfig) -> Result<AdvResult> {
    let cfg = AttackConfig {
        mode: Mode::Stage1Only,
        gamma: None,
        ..cfg.clone()
    };
    run_attack(ckpt, x, y, &cfg)
}
