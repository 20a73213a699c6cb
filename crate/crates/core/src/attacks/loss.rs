//! Pixel-weighted cross-entropy objectives.
//!
//! Every objective is `sum_i w_i * L_i` with the normalizer `H * W` baked
//! into the weights, whatever the branch sizes are. The weight maps feed
//! `Graph::weighted_sum`; the scalar `*_loss` functions evaluate the same
//! objective directly in 64-bit.

use super::partition::PixelPartition;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

fn two_branch_weights(part: &PixelPartition, weight_a: f64, weight_b: f64) -> Tensor {
    let n = (part.height * part.width) as f32;
    let wa = weight_a as f32 / n;
    let wb = weight_b as f32 / n;
    let data = part.mask_a.iter().map(|&a| if a { wa } else { wb }).collect();
    Tensor::new(vec![part.height, part.width], data).expect("partition dimensions")
}

/// `1 / (H * W)` everywhere: plain mean cross-entropy.
pub fn uniform_weights(height: usize, width: usize) -> Tensor {
    Tensor::full(&[height, width], 1.0 / (height * width) as f32)
}

/// `(1 - gamma) / HW` on correct pixels, `gamma / HW` on misclassified ones.
pub fn stage1_weights(part: &PixelPartition, gamma: f64) -> Tensor {
    two_branch_weights(part, 1.0 - gamma, gamma)
}

/// `(1 - beta) / HW` on high-divergence pixels, `beta / HW` on the rest.
pub fn stage2_weights(part: &PixelPartition, beta: f64) -> Tensor {
    two_branch_weights(part, 1.0 - beta, beta)
}

fn two_branch_loss(pixel_ce: &Tensor, part: &PixelPartition, weight_a: f64, weight_b: f64) -> Result<f64> {
    if pixel_ce.shape() != [part.height, part.width] {
        return Err(Error::shape(
            "weighted loss",
            format!(
                "pixel losses {:?} vs partition {}x{}",
                pixel_ce.shape(),
                part.height,
                part.width
            ),
        ));
    }
    let (mut sum_a, mut sum_b) = (0.0f64, 0.0f64);
    for (&l, &a) in pixel_ce.data().iter().zip(&part.mask_a) {
        if a {
            sum_a += l as f64;
        } else {
            sum_b += l as f64;
        }
    }
    let n = (part.height * part.width) as f64;
    Ok(weight_a / n * sum_a + weight_b / n * sum_b)
}

pub fn stage1_loss(pixel_ce: &Tensor, part: &PixelPartition, gamma: f64) -> Result<f64> {
    two_branch_loss(pixel_ce, part, 1.0 - gamma, gamma)
}

pub fn stage2_loss(pixel_ce: &Tensor, part: &PixelPartition, beta: f64) -> Result<f64> {
    two_branch_loss(pixel_ce, part, 1.0 - beta, beta)
}
