use std::f64::consts::PI;

use super::config::{AttackConfig, StepSchedule, Transform};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x' = x_adv + alpha * sign(grad)`, projected onto the epsilon ball around
/// `x_clean` and then onto `[0, 1]`.
pub fn pgd_step(x_adv: &Tensor, grad: &Tensor, alpha: f32, epsilon: f32, x_clean: &Tensor) -> Result<Tensor> {
    if x_adv.shape() != grad.shape() || x_adv.shape() != x_clean.shape() {
        return Err(Error::shape(
            "pgd_step",
            format!(
                "x_adv {:?}, grad {:?}, x {:?}",
                x_adv.shape(),
                grad.shape(),
                x_clean.shape()
            ),
        ));
    }
    let data = x_adv
        .data()
        .iter()
        .zip(grad.data())
        .zip(x_clean.data())
        .map(|((&xa, &g), &x)| {
            let moved = xa + alpha * sign(g);
            ((moved - x).clamp(-epsilon, epsilon) + x).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x_adv.shape().to_vec(), data)
}

/// Step size for iteration `t` of `n` (0-based). The decaying schedules are
/// floored at a tenth of the base step.
pub fn step_size_schedule(t: usize, n: usize, cfg: &AttackConfig) -> f32 {
    let alpha = cfg.step_size as f64;
    let frac = t as f64 / n as f64;
    let a = match cfg.step_schedule {
        StepSchedule::Constant => return cfg.step_size,
        StepSchedule::LinearDecay => alpha * (1.0 - frac),
        StepSchedule::CosineDecay => alpha * (1.0 + (PI * frac).cos()) / 2.0,
    };
    a.max(alpha / 10.0) as f32
}

/// Normalized square Gaussian, `size x size`.
pub fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let r = (size / 2) as f64;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / s2).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Per-channel zero-padded 2-D convolution of a `[C, H, W]` tensor.
fn smooth_channels(grad: &Tensor, kernel: &[f32], size: usize) -> Result<Tensor> {
    let (c, h, w) = grad.dims3()?;
    let r = (size / 2) as isize;
    let src = grad.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f32;
                for ky in -r..=r {
                    let sy = y + ky;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in -r..=r {
                        let sx = x + kx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let kv = kernel[((ky + r) as usize) * size + (kx + r) as usize];
                        acc += kv * src[base + sy as usize * w + sx as usize];
                    }
                }
                out[base + y as usize * w + x as usize] = acc;
            }
        }
    }
    Tensor::new(grad.shape().to_vec(), out)
}

/// Accumulated state of the momentum-style transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformState {
    pub momentum: Tensor,
}

impl TransformState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            momentum: Tensor::zeros(shape),
        }
    }
}

/// Turns the raw loss gradient into the direction whose sign is stepped.
///
/// Nesterov shares the momentum update; its look-ahead is applied by the
/// caller before the forward pass (see [`lookahead`]).
pub fn gradient_transform(
    raw: Tensor,
    state: TransformState,
    transform: Transform,
    decay: f32,
    kernel: &[f32],
    kernel_size: usize,
) -> Result<(Tensor, TransformState)> {
    match transform {
        Transform::None => Ok((raw, state)),
        Transform::Translation => Ok((smooth_channels(&raw, kernel, kernel_size)?, state)),
        Transform::Momentum | Transform::Nesterov => {
            let l1: f64 = raw.data().iter().map(|v| v.abs() as f64).sum();
            let norm = l1.max(1e-12) as f32;
            let next = state.momentum.zip_map(&raw, |g, r| decay * g + r / norm)?;
            Ok((next.clone(), TransformState { momentum: next }))
        }
    }
}

/// NI look-ahead point `x_adv + alpha * mu * g`.
pub fn lookahead(x_adv: &Tensor, state: &TransformState, alpha: f32, decay: f32) -> Result<Tensor> {
    x_adv.zip_map(&state.momentum, |x, g| x + alpha * decay * g)
}
