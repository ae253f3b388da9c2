//! The reconstruction network: `Conv(m->w) + ReLU`, then `depth` blocks of
//! `Conv(w->w) + BN + ReLU`, then `Conv(w->1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::{relu, relu_backward};
use super::batchnorm::{BatchNorm2d, Mode};
use super::conv::Conv2d;
use super::tensor::Tensor4;
use crate::error::{invalid, Error, Result};
use crate::projection::{BpTensor, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Input channels, one per view.
    pub views: usize,
    /// Feature maps in the hidden layers.
    pub width: usize,
    /// Number of middle conv+BN+ReLU blocks.
    pub depth: usize,
}

impl Architecture {
    pub fn paper(views: usize) -> Self {
        Self {
            views,
            width: 64,
            depth: 15,
        }
    }

    pub fn conv_count(&self) -> usize {
        self.depth + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
}

enum Cached {
    Conv { dims: [usize; 4], cols: Vec<f64> },
    BatchNorm,
    Relu { input: Tensor4 },
}

/// Intermediate values recorded by a training forward pass.
pub struct Tape {
    cached: Vec<Cached>,
}

fn layer_chain(arch: Architecture, mut conv: impl FnMut(usize, usize) -> Conv2d) -> Vec<Layer> {
    let mut layers = vec![Layer::Conv(conv(arch.views, arch.width)), Layer::Relu];
    for _ in 0..arch.depth {
        layers.push(Layer::Conv(conv(arch.width, arch.width)));
        layers.push(Layer::BatchNorm(BatchNorm2d::new(arch.width)));
        layers.push(Layer::Relu);
    }
    layers.push(Layer::Conv(conv(arch.width, 1)));
    layers
}

impl Model {
    /// He-initialized model; deterministic in `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        Self::check_arch(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            arch,
            layers: layer_chain(arch, |i, o| Conv2d::he_normal(i, o, &mut rng)),
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::check_arch(arch)?;
        Ok(Self {
            arch,
            layers: layer_chain(arch, Conv2d::zeros),
        })
    }

    /// Assembles a model from an explicit layer list, checking that it has
    /// the expected block pattern and shapes.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        let template = Self::zeros(arch)?;
        if layers.len() != template.layers.len() {
            return Err(invalid(format!(
                "expected {} layers, got {}",
                template.layers.len(),
                layers.len()
            )));
        }
        for (i, (t, l)) in template.layers.iter().zip(&layers).enumerate() {
            let ok = match (t, l) {
                (Layer::Conv(a), Layer::Conv(b)) => {
                    a.in_channels() == b.in_channels() && a.out_channels() == b.out_channels()
                }
                (Layer::BatchNorm(a), Layer::BatchNorm(b)) => a.channels() == b.channels(),
                (Layer::Relu, Layer::Relu) => true,
                _ => false,
            };
            if !ok {
                return Err(invalid(format!("layer {i} does not match the architecture")));
            }
        }
        Ok(Self { arch, layers })
    }

    fn check_arch(arch: Architecture) -> Result<()> {
        if arch.views == 0 || arch.width == 0 {
            return Err(invalid("views and width must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Trainable parameters in layer order: conv weight, conv bias, BN gamma,
    /// BN beta.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight[..]);
                    out.push(&c.bias[..]);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gamma[..]);
                    out.push(&bn.beta[..]);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight[..]);
                    out.push(&mut c.bias[..]);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma[..]);
                    out.push(&mut bn.beta[..]);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn param_lengths(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.channels() != self.arch.views {
            return Err(invalid(format!(
                "model expects {} views, input has {}",
                self.arch.views,
                input.channels()
            )));
        }
        if input.height() < 3 || input.width() < 3 {
            return Err(invalid(format!(
                "spatial size {}x{} is below 3x3",
                input.height(),
                input.width()
            )));
        }
        Ok(())
    }

    /// Inference pass using running batch-norm statistics.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward_cols(&x)?.0,
                Layer::BatchNorm(bn) => bn.forward_eval(&x)?,
                Layer::Relu => relu(&x),
            };
            debug_assert!(x.is_finite(), "non-finite activation");
        }
        Ok(x)
    }

    /// Training pass with batch statistics; records what [`Model::backward`]
    /// needs.
    pub fn forward_train(&mut self, input: &Tensor4) -> Result<(Tensor4, Tape)> {
        self.check_input(input)?;
        let mut cached = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = match layer {
                Layer::Conv(c) => {
                    let dims = x.dims();
                    let (y, cols) = c.forward_cols(&x)?;
                    cached.push(Cached::Conv { dims, cols });
                    y
                }
                Layer::BatchNorm(bn) => {
                    cached.push(Cached::BatchNorm);
                    bn.forward_train(&x)?
                }
                Layer::Relu => {
                    let y = relu(&x);
                    cached.push(Cached::Relu { input: x });
                    y
                }
            };
            if !x.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite activation after layer {}",
                    cached.len() - 1
                )));
            }
        }
        Ok((x, Tape { cached }))
    }

    /// Parameter gradients, in [`Model::params`] order, for the loss whose
    /// gradient with respect to the output is `grad_out`.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor4) -> Result<Vec<Vec<f64>>> {
        Ok(self.backward_full(tape, grad_out, false)?.0)
    }

    /// Like [`Model::backward`], also returning the gradient with respect to
    /// the network input.
    pub fn backward_with_input(&self, tape: &Tape, grad_out: &Tensor4) -> Result<(Vec<Vec<f64>>, Tensor4)> {
        let (grads, gi) = self.backward_full(tape, grad_out, true)?;
        Ok((grads, gi.expect("requested")))
    }

    fn backward_full(
        &self,
        tape: &Tape,
        grad_out: &Tensor4,
        need_input: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<Tensor4>)> {
        if tape.cached.len() != self.layers.len() {
            return Err(Error::Usage("tape does not belong to this model".into()));
        }
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = grad_out.clone();
        for (idx, (layer, cache)) in self.layers.iter().zip(&tape.cached).enumerate().rev() {
            match (layer, cache) {
                (Layer::Conv(c), Cached::Conv { dims, cols }) => {
                    let want_input = idx > 0 || need_input;
                    let (gi, gw, gb) = c.backward_cols(*dims, cols, &g, want_input)?;
                    grads.push(gb);
                    grads.push(gw);
                    if let Some(gi) = gi {
                        g = gi;
                    }
                }
                (Layer::BatchNorm(bn), Cached::BatchNorm) => {
                    let bg = bn.backward(&g)?;
                    grads.push(bg.beta);
                    grads.push(bg.gamma);
                    g = bg.input;
                }
                (Layer::Relu, Cached::Relu { input }) => {
                    g = relu_backward(input, &g)?;
                }
                _ => return Err(Error::Usage("tape does not belong to this model".into())),
            }
        }
        grads.reverse();
        Ok((grads, if need_input { Some(g) } else { None }))
    }

    /// Reconstructs an image from a back-projection tensor (eval mode).
    pub fn reconstruct(&self, z: &BpTensor) -> Result<Image> {
        let out = self.forward(&bp_tensor_input(z))?;
        Image::new(z.size(), out.into_data())
    }
}

/// Views a back-projection tensor as a `1 x m x n x n` network input.
pub fn bp_tensor_input(z: &BpTensor) -> Tensor4 {
    Tensor4::new([1, z.views(), z.size(), z.size()], z.data().to_vec()).expect("slab-major layout")
}

/// Runs the network in the requested mode.
pub fn network_forward(input: &Tensor4, model: &mut Model, mode: Mode) -> Result<Tensor4> {
    match mode {
        Mode::Eval => model.forward(input),
        Mode::Train => model.forward_train(input).map(|(out, _)| out),
    }
}
