use super::tensor::Tensor4;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Biased (population) variance estimate.
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    dims: [usize; 4],
    /// Normalized input, NCHW.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check(&self, input: &Tensor4) -> Result<()> {
        if input.channels() != self.channels() {
            return Err(invalid(format!(
                "batch norm has {} channels, input has {}",
                self.channels(),
                input.channels()
            )));
        }
        Ok(())
    }

    /// Normalizes with the stored running statistics.
    pub fn forward_eval(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check(input)?;
        let [b, c, _, _] = input.dims();
        let p = input.plane();
        let mut out = input.clone();
        for ci in 0..c {
            let scale = self.gamma[ci] / (self.running_var[ci] + self.eps).sqrt();
            let shift = self.beta[ci] - scale * self.running_mean[ci];
            for bi in 0..b {
                for v in &mut out.data_mut()[(bi * c + ci) * p..][..p] {
                    *v = scale * *v + shift;
                }
            }
        }
        Ok(out)
    }

    /// Normalizes with batch statistics, caches them for the backward pass,
    /// and folds them into the running estimates.
    pub fn forward_train(&mut self, input: &Tensor4) -> Result<Tensor4> {
        self.check(input)?;
        let [b, c, _, _] = input.dims();
        let p = input.plane();
        let count = b * p;
        if count < 2 {
            return Err(invalid(
                "train-mode batch norm needs at least 2 values per channel",
            ));
        }
        let data = input.data();
        let mut out = Tensor4::zeros(input.dims());
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let planes = || (0..b).map(move |bi| (bi * c + ci) * p);
            let mut sum = 0.0;
            for s in planes() {
                sum += data[s..s + p].iter().sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0;
            for s in planes() {
                sq += data[s..s + p].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let var = sq / count as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = is;
            for s in planes() {
                for i in s..s + p {
                    let xn = (data[i] - mean) * is;
                    xhat[i] = xn;
                    out.data_mut()[i] = self.gamma[ci] * xn + self.beta[ci];
                }
            }
            let mo = self.momentum;
            self.running_mean[ci] = (1.0 - mo) * self.running_mean[ci] + mo * mean;
            self.running_var[ci] = (1.0 - mo) * self.running_var[ci] + mo * var;
        }
        self.cache = Some(BnCache {
            dims: input.dims(),
            xhat,
            inv_std,
        });
        Ok(out)
    }

    /// Gradients through the batch statistics of the last train-mode forward.
    pub fn backward(&self, grad_out: &Tensor4) -> Result<BnGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("batch norm backward called without a train-mode forward".into()))?;
        if grad_out.dims() != cache.dims {
            return Err(invalid(format!(
                "batch norm grad_out shape {:?} does not match cached {:?}",
                grad_out.dims(),
                cache.dims
            )));
        }
        let [b, c, _, _] = cache.dims;
        let p = grad_out.plane();
        let count = (b * p) as f64;
        let dy = grad_out.data();
        let mut grad_in = Tensor4::zeros(cache.dims);
        let mut grad_gamma = vec![0.0; c];
        let mut grad_beta = vec![0.0; c];
        for ci in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for bi in 0..b {
                let s = (bi * c + ci) * p;
                for i in s..s + p {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * cache.xhat[i];
                }
            }
            grad_beta[ci] = sum_dy;
            grad_gamma[ci] = sum_dy_xhat;
            let k = self.gamma[ci] * cache.inv_std[ci] / count;
            for bi in 0..b {
                let s = (bi * c + ci) * p;
                for i in s..s + p {
                    grad_in.data_mut()[i] = k * (count * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        Ok(BnGrads {
            input: grad_in,
            gamma: grad_gamma,
            beta: grad_beta,
        })
    }
}

pub fn batchnorm_forward(input: &Tensor4, layer: &mut BatchNorm2d, mode: Mode) -> Result<Tensor4> {
    match mode {
        Mode::Train => layer.forward_train(input),
        Mode::Eval => layer.forward_eval(input),
    }
}

/// `input` must be the tensor given to the preceding train-mode forward.
pub fn batchnorm_backward(input: &Tensor4, layer: &BatchNorm2d, grad_out: &Tensor4) -> Result<BnGrads> {
    input.same_dims(grad_out, "batch norm backward")?;
    layer.backward(grad_out)
}
