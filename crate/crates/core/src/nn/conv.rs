//! "Same"-padded 2D cross-correlation blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply_in_place(self, data: &mut [f32]) {
        if self == Activation::Relu {
            for v in data {
                *v = v.max(0.0);
            }
        }
    }
}

/// One convolution layer `σ(X ∗ W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// out_ch × in_ch × k × k
    pub kernel: Tensor,
    /// out_ch
    pub bias: Tensor,
    pub activation: Activation,
}

impl ConvBlock {
    pub fn new(kernel: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let &[out_ch, _, kh, kw] = kernel.shape() else {
            return Err(Error::shape(format!(
                "kernel must be out×in×k×k, got {:?}",
                kernel.shape()
            )));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel must be square with odd size, got {kh}×{kw}"
            )));
        }
        if bias.shape() != [out_ch] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {out_ch} output channels",
                bias.shape()
            )));
        }
        Ok(Self {
            kernel,
            bias,
            activation,
        })
    }

    pub fn zeros(in_ch: usize, out_ch: usize, k: usize, activation: Activation) -> Self {
        Self::new(
            Tensor::zeros(&[out_ch, in_ch, k, k]),
            Tensor::zeros(&[out_ch]),
            activation,
        )
        .expect("zeros() called with an even kernel size")
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// `X ∗ W` without bias or activation.
    pub fn correlate(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "input shape {:?} does not match kernel shape {:?}",
                input.shape(),
                self.kernel.shape()
            )));
        }
        let out_ch = self.out_channels();
        let k = self.kernel_size();
        let mut out = Tensor::zeros(&[out_ch, h, w]);
        let kernel = self.kernel.data();
        // sums run in f64 so deep channel stacks stay within f32 rounding
        let mut acc = vec![0.0f64; h * w];
        for o in 0..out_ch {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ci in 0..c {
                let src = input.plane(ci);
                let weights = &kernel[(o * c + ci) * k * k..(o * c + ci + 1) * k * k];
                accumulate_correlation(&mut acc, src, weights, h, w, k);
            }
            for (d, a) in out.plane_mut(o).iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
        Ok(out)
    }

    /// Adds the bias and applies the activation to a pre-bias map.
    pub fn finish(&self, mut pre_bias: Tensor) -> Tensor {
        for o in 0..self.out_channels() {
            let b = self.bias.data()[o];
            let plane = pre_bias.plane_mut(o);
            for v in plane.iter_mut() {
                *v += b;
            }
            self.activation.apply_in_place(plane);
        }
        pre_bias
    }
}

/// `dst += src ⋆ weights` for one (out, in) channel pair with zero padding.
fn accumulate_correlation(
    dst: &mut [f64],
    src: &[f32],
    weights: &[f32],
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - r;
        for kx in 0..k {
            let dx = kx as isize - r;
            let wt = f64::from(weights[ky * k + kx]);
            if wt == 0.0 {
                continue;
            }
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let (y0, y1) = valid_range(h, dy);
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let out_row = &mut dst[y * w + x0..y * w + x1];
                let sx0 = (x0 as isize + dx) as usize;
                let in_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for (o, &i) in out_row.iter_mut().zip(in_row) {
                    *o += wt * f64::from(i);
                }
            }
        }
    }
}

/// Output indices `x` for which `x + offset` lies in `0..len`.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(len), hi)
}

pub fn conv2d_forward(input: &Tensor, block: &ConvBlock) -> Result<Tensor> {
    let pre = block.correlate(input)?;
    Ok(block.finish(pre))
}

/// Gradients of one convolution block.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

/// Backpropagates `grad_pre` (the gradient with respect to the pre-activation
/// output `X ∗ W + b`) through the correlation.
pub fn conv2d_backward(input: &Tensor, block: &ConvBlock, grad_pre: &Tensor) -> Result<ConvGrads> {
    let (c, h, w) = input.chw()?;
    let out_ch = block.out_channels();
    if grad_pre.chw()? != (out_ch, h, w) {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match block output {out_ch}×{h}×{w}",
            grad_pre.shape()
        )));
    }
    let k = block.kernel_size();
    let r = (k / 2) as isize;
    let kernel = block.kernel.data();
    let mut grad_kernel = Tensor::zeros(block.kernel.shape());
    let mut grad_bias = Tensor::zeros(&[out_ch]);
    let mut grad_input = Tensor::zeros(&[c, h, w]);

    for o in 0..out_ch {
        let g = grad_pre.plane(o);
        grad_bias.data_mut()[o] = g.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        for ci in 0..c {
            let src = input.plane(ci);
            let base = (o * c + ci) * k * k;
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0f32;
                    let wt = kernel[base + ky * k + kx];
                    let gin = grad_input.plane_mut(ci);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let g_row = &g[y * w + x0..y * w + x1];
                        let in_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        let gin_row = &mut gin[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for ((gi, &gv), &iv) in gin_row.iter_mut().zip(g_row).zip(in_row) {
                            acc += gv * iv;
                            *gi += wt * gv;
                        }
                    }
                    grad_kernel.data_mut()[base + ky * k + kx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        kernel: grad_kernel,
        bias: grad_bias,
        input: grad_input,
    })
}

/// Masks an upstream gradient by the activation derivative, given the
/// block's post-activation output.
pub fn activation_backward(activation: Activation, output: &Tensor, grad: &mut Tensor) {
    if activation == Activation::Relu {
        for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
            if y <= 0.0 {
                *g = 0.0;
            }
        }
    }
}
