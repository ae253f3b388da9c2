//! 3x3 "same" cross-correlation, lowered to a GEMM over an im2col buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor4;
use crate::error::{invalid, Result};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    /// `(out, in, 3, 3)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn from_parts(in_channels: usize, out_channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != out_channels * in_channels * TAPS || bias.len() != out_channels {
            return Err(invalid(format!(
                "conv {in_channels}->{out_channels} parameter lengths {} / {} are wrong",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    /// He-normal weights, std `sqrt(2 / (in * 9))`, zero bias.
    pub fn he_normal<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_channels * TAPS) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut layer = Self::zeros(in_channels, out_channels);
        for w in &mut layer.weight {
            *w = normal.sample(rng);
        }
        layer
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(invalid(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cols(&self, input: &Tensor4) -> Result<(Tensor4, Vec<f64>)> {
        self.check_input(input)?;
        let cols = im2col(input);
        let [b, _, h, w] = input.dims();
        let n = b * h * w;
        let mut out = vec![0.0; self.out_channels * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(self.bias[o]);
        }
        gemm(
            self.out_channels,
            self.in_channels * TAPS,
            n,
            (&self.weight, self.in_channels * TAPS, 1),
            (&cols, n, 1),
            (&mut out, n, 1),
        );
        Ok((Tensor4::from_channel_major([b, self.out_channels, h, w], &out), cols))
    }

    /// Gradients given the im2col buffer of the forward input.
    pub(crate) fn backward_cols(
        &self,
        input_dims: [usize; 4],
        cols: &[f64],
        grad_out: &Tensor4,
        need_input: bool,
    ) -> Result<(Option<Tensor4>, Vec<f64>, Vec<f64>)> {
        let [b, _, h, w] = input_dims;
        if grad_out.dims() != [b, self.out_channels, h, w] {
            return Err(invalid(format!(
                "conv grad_out shape {:?} does not match output {:?}",
                grad_out.dims(),
                [b, self.out_channels, h, w]
            )));
        }
        let n = b * h * w;
        let k = self.in_channels * TAPS;
        let dy = grad_out.to_channel_major();
        let grad_bias: Vec<f64> = dy.chunks(n).map(|row| row.iter().sum()).collect();

        // dW = dY * cols^T
        let mut grad_weight = vec![0.0; self.out_channels * k];
        gemm(self.out_channels, n, k, (&dy, n, 1), (cols, 1, n), (&mut grad_weight, k, 1));

        let grad_input = if need_input {
            // dcols = W^T * dY
            let mut dcols = vec![0.0; k * n];
            gemm(k, self.out_channels, n, (&self.weight, 1, k), (&dy, n, 1), (&mut dcols, n, 1));
            Some(col2im(&dcols, input_dims))
        } else {
            None
        };
        Ok((grad_input, grad_weight, grad_bias))
    }
}

/// `C += A * B` for row/column-strided operands.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    (c, rsc, csc): (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
        assert!(span(m, k, rsa, csa) < a.len());
        assert!(span(k, n, rsb, csb) < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Lowers a padded 3x3 neighbourhood into rows `in * 9 + dy * 3 + dx` and
/// columns `b * plane + y * w + x`.
fn im2col(input: &Tensor4) -> Vec<f64> {
    let [b, c, h, w] = input.dims();
    let n = b * h * w;
    let mut cols = vec![0.0; c * TAPS * n];
    let data = input.data();
    for ci in 0..c {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = &mut cols[((ci * TAPS) + dy * KERNEL + dx) * n..][..n];
                for bi in 0..b {
                    let plane = &data[(bi * c + ci) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[bi * h * w + y * w..][..w];
                        // x + dx - 1 must stay inside [0, w)
                        let x0 = 1usize.saturating_sub(dx);
                        let x1 = (w + 1 - dx).min(w);
                        for x in x0..x1 {
                            dst[x] = src[x + dx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], dims: [usize; 4]) -> Tensor4 {
    let [b, c, h, w] = dims;
    let n = b * h * w;
    let mut out = Tensor4::zeros(dims);
    let data = out.data_mut();
    for ci in 0..c {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = &cols[((ci * TAPS) + dy * KERNEL + dx) * n..][..n];
                for bi in 0..b {
                    let plane = &mut data[(bi * c + ci) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[bi * h * w + y * w..][..w];
                        let dst = &mut plane[sy as usize * w..][..w];
                        let x0 = 1usize.saturating_sub(dx);
                        let x1 = (w + 1 - dx).min(w);
                        for x in x0..x1 {
                            dst[x + dx - 1] += src[x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded 3x3 cross-correlation with stride 1; output keeps the input's
/// spatial size.
pub fn conv2d_forward(input: &Tensor4, layer: &Conv2d) -> Result<Tensor4> {
    layer.forward_cols(input).map(|(out, _)| out)
}

pub fn conv2d_backward(input: &Tensor4, layer: &Conv2d, grad_out: &Tensor4) -> Result<ConvGrads> {
    layer.check_input(input)?;
    let cols = im2col(input);
    let (gi, weight, bias) = layer.backward_cols(input.dims(), &cols, grad_out, true)?;
    Ok(ConvGrads {
        input: gi.expect("requested"),
        weight,
        bias,
    })
}
