//! Stride-1, resolution-preserving 2-D convolution via im2col + GEMM.
//!
//! Column layout: row `(ci * k + ky) * k + kx`, column `y * w + x` holds
//! `input[ci, y + ky - p, x + kx - p]` (zero outside the image). All
//! accumulation runs in a fixed order, so results are bit-reproducible.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, kc, k, k2) = match kernel.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be rank 4, got {:?}", kernel.shape()),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be odd and square, got {k}x{k2}"),
            ));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::shape(
                "conv2d",
                format!("padding {padding} does not preserve resolution for k={k}"),
            ));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", bias.shape()),
            ));
        }
        Ok(Self {
            c_in,
            c_out,
            k,
            h,
            w,
            pad: padding,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Valid x range `[lo, hi)` for kernel column offset `kx`.
    fn x_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.w);
        (lo, hi)
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let plane = g.plane();
    let mut cols = vec![T::zero(); g.rows() * plane];
    for ci in 0..g.c_in {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (x_lo, x_hi) = g.x_span(kx);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[sy * w + sx_lo..sy * w + sx_lo + n]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input image.
pub(crate) fn col2im<T: Real>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let plane = g.plane();
    let mut out = vec![T::zero(); g.c_in * plane];
    for ci in 0..g.c_in {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (x_lo, x_hi) = g.x_span(kx);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    let d = &mut dst[sy * w + sx_lo..sy * w + sx_lo + n];
                    for (d, &s) in d.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    out
}

/// Returns the output and the column matrix (kept for the backward pass).
pub(crate) fn forward<T: Real>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let plane = g.plane();
    let rows = g.rows();
    let cols = im2col(g, input.data());
    let mut out = vec![T::zero(); g.c_out * plane];
    for (co, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(bias.data()[co]);
    }
    T::gemm(
        g.c_out,
        rows,
        plane,
        kernel.data(),
        (rows as isize, 1),
        &cols,
        (plane as isize, 1),
        T::one(),
        &mut out,
    );
    let t = Tensor::new(vec![g.c_out, g.h, g.w], out).expect("conv output shape");
    (t, cols)
}

pub(crate) struct ConvGrads<T: Real> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    kernel: &Tensor<T>,
    cols: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.plane();
    let rows = g.rows();
    let input = want.0.then(|| {
        let mut dcols = vec![T::zero(); rows * plane];
        // kernel^T [rows x c_out] * grad_out [c_out x plane]
        T::gemm(
            rows,
            g.c_out,
            plane,
            kernel.data(),
            (1, rows as isize),
            grad_out,
            (plane as isize, 1),
            T::zero(),
            &mut dcols,
        );
        col2im(g, &dcols)
    });
    let kernel_grad = want.1.then(|| {
        let mut dk = vec![T::zero(); g.c_out * rows];
        // grad_out [c_out x plane] * cols^T [plane x rows]
        T::gemm(
            g.c_out,
            plane,
            rows,
            grad_out,
            (plane as isize, 1),
            cols,
            (1, plane as isize),
            T::zero(),
            &mut dk,
        );
        dk
    });
    let bias = want.2.then(|| {
        grad_out
            .chunks(plane)
            .map(|c| c.iter().copied().fold(T::zero(), |a, b| a + b))
            .collect()
    });
    ConvGrads {
        input,
        kernel: kernel_grad,
        bias,
    }
}
