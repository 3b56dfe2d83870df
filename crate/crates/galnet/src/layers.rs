//! Network layers: 2-D convolution, batch normalization, fully connected,
//! and the position squeeze-excitation (PSE) spatial gating module.
//!
//! Layers are parameter containers; the forward functions build autodiff
//! graphs through the tensor ops. Data layout is `[B, H, W, C]` throughout.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{batch_norm, conv2d, Tensor};
use crate::{Error, Result};

/// Forward phase: training uses batch statistics and updates running
/// stats; inference is a pure function of stored state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, vals).expect("shape/values consistent")
}

// ── Conv2d ───────────────────────────────────────────────────────────

pub struct Conv2dLayer {
    /// `[KH, KW, Cin, Cout]`
    pub kernel: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Conv2dLayer {
        Conv2dLayer {
            kernel: he_normal(&[kh, kw, cin, cout], kh * kw * cin, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.kernel, &self.bias, self.stride, self.padding)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }
}

/// Cross-correlation with bias over `[B,H,W,Cin]`.
pub fn conv2d_forward(x: &Tensor, layer: &Conv2dLayer) -> Result<Tensor> {
    layer.forward(x)
}

// ── BatchNorm ────────────────────────────────────────────────────────

pub struct BatchNormLayer {
    /// `[C]` scale
    pub gamma: Tensor,
    /// `[C]` shift
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> BatchNormLayer {
        BatchNormLayer {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    /// Train mode normalizes by biased batch statistics per channel and
    /// folds them into the running stats; infer mode uses running stats
    /// without mutation.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.channels() {
            return Err(Error::Dimension(format!(
                "batchnorm: expected [B,H,W,{}], got {s:?}",
                self.channels()
            )));
        }
        match mode {
            Mode::Train => {
                let n = s[0] * s[1] * s[2];
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "batchnorm train mode needs at least 2 elements per channel, got {n}"
                    )));
                }
                let c = s[3];
                let v = x.values();
                let mut mean = vec![0.0; c];
                for (i, &xv) in v.iter().enumerate() {
                    mean[i % c] += xv;
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; c];
                for (i, &xv) in v.iter().enumerate() {
                    let d = xv - mean[i % c];
                    var[i % c] += d * d;
                }
                for vv in var.iter_mut() {
                    *vv /= n as f64;
                }
                drop(v);
                {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for i in 0..c {
                        rm[i] = self.momentum * rm[i] + (1.0 - self.momentum) * mean[i];
                        rv[i] = self.momentum * rv[i] + (1.0 - self.momentum) * var[i];
                    }
                }
                batch_norm(x, &self.gamma, &self.beta, &mean, &var, self.epsilon, true)
            }
            Mode::Infer => {
                let rm = self.running_mean.borrow().clone();
                let rv = self.running_var.borrow().clone();
                batch_norm(x, &self.gamma, &self.beta, &rm, &rv, self.epsilon, false)
            }
        }
    }
}

pub fn batchnorm_forward(x: &Tensor, layer: &BatchNormLayer, mode: Mode) -> Result<Tensor> {
    layer.forward(x, mode)
}

// ── Position squeeze-excitation ──────────────────────────────────────

/// Spatial gating: average over channels, two small convolutions, a
/// sigmoid mask, and elementwise multiplication with the input.
pub struct PseModule {
    /// 3×3, 1 -> 4 channels, padding 1
    pub conv1: Conv2dLayer,
    /// 3×3, 4 -> 1 channel, padding 1
    pub conv2: Conv2dLayer,
}

impl PseModule {
    pub fn new<R: Rng>(rng: &mut R) -> PseModule {
        PseModule {
            conv1: Conv2dLayer::new(3, 3, 1, 4, 1, 1, rng),
            conv2: Conv2dLayer::new(3, 3, 4, 1, 1, 1, rng),
        }
    }

    /// `sigmoid(conv2(relu(conv1(PAP(x)))))`, shape `[B,H,W,1]`.
    pub fn mask(&self, x: &Tensor) -> Result<Tensor> {
        let pap = position_average_pool(x)?;
        let h = self.conv1.forward(&pap)?.relu();
        Ok(self.conv2.forward(&h)?.sigmoid())
    }
}

/// Mean over channels at each position: `[B,H,W,C] -> [B,H,W,1]`.
pub fn position_average_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "position_average_pool expects [B,H,W,C], got {s:?}"
        )));
    }
    x.reduce_mean(&[3], true)
}

/// Gates every channel of `x` by the module's single-channel mask.
pub fn pse_forward(x: &Tensor, m: &PseModule) -> Result<Tensor> {
    let c = x.shape()[3];
    let mask = m.mask(x)?;
    x.mul(&mask.expand_last(c)?)
}

// ── Linear ───────────────────────────────────────────────────────────

pub struct LinearLayer {
    /// `[Din, Dout]`
    pub weight: Tensor,
    /// `[Dout]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new<R: Rng>(din: usize, dout: usize, rng: &mut R) -> LinearLayer {
        LinearLayer {
            weight: he_normal(&[din, dout], din, rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row_vec(&self.bias)
    }
}

/// `x·W + b` over `[B,Din]`.
pub fn linear_forward(x: &Tensor, layer: &LinearLayer) -> Result<Tensor> {
    layer.forward(x)
}
