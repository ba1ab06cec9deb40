use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::{conv, fused};
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Kaiming { fan_in })?;
        let bias = if bias {
            Some(pb.get("bias", &[out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// "Same"-padded convolution for odd kernels.
    pub fn same(pb: &ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        Self::new(pb, in_ch, out_ch, kernel, stride, kernel / 2, bias)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, self.weight.as_tensor(), self.stride, self.pad)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[out_dim, in_dim], Init::FanInUniform { fan_in: in_dim })?,
            bias: pb.get("bias", &[out_dim], Init::FanInUniform { fan_in: in_dim })?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch statistics in training, running averages in evaluation.
    Batch,
    /// Per-sample group normalization with an affine transform.
    Group,
    None,
}

#[derive(Debug, Clone)]
enum NormInner {
    Identity,
    Group {
        gamma: Var,
        beta: Var,
        groups: usize,
    },
    Batch {
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        training: Arc<AtomicBool>,
    },
}

#[derive(Debug, Clone)]
pub struct Norm {
    inner: NormInner,
}

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn new(pb: &ParamBuilder, kind: NormKind, channels: usize, group_size: usize, gamma0: f64) -> Result<Self> {
        let inner = match kind {
            NormKind::None => NormInner::Identity,
            NormKind::Group => {
                let target = (channels / group_size.max(1)).max(1);
                let groups = (1..=target).rev().find(|g| channels % g == 0).unwrap_or(1);
                NormInner::Group {
                    gamma: pb.get("gamma", &[channels], Init::Const(gamma0))?,
                    beta: pb.get("beta", &[channels], Init::Const(0.0))?,
                    groups,
                }
            }
            NormKind::Batch => NormInner::Batch {
                gamma: pb.get("gamma", &[channels], Init::Const(gamma0))?,
                beta: pb.get("beta", &[channels], Init::Const(0.0))?,
                running_mean: pb.get("running_mean", &[channels], Init::Const(0.0))?,
                running_var: pb.get("running_var", &[channels], Init::Const(1.0))?,
                training: pb.training_flag(),
            },
        };
        Ok(Self { inner })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.inner {
            NormInner::Identity => Ok(x.clone()),
            NormInner::Group { gamma, beta, groups } => {
                Ok(fused::group_norm(x, gamma.as_tensor(), beta.as_tensor(), *groups, NORM_EPS)?)
            }
            NormInner::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
                training,
            } => {
                if training.load(Ordering::Relaxed) {
                    let y = fused::batch_norm(x, gamma.as_tensor(), beta.as_tensor(), NORM_EPS)?;
                    update_running(x, running_mean, running_var)?;
                    return Ok(y);
                }
                let c = gamma.dims()[0];
                let shape = (1, c, 1, 1);
                let scale = (gamma.as_tensor() / (running_var.as_tensor() + NORM_EPS)?.sqrt()?)?;
                let shift = (beta.as_tensor() - (running_mean.as_tensor() * &scale)?)?;
                Ok(x
                    .broadcast_mul(&scale.reshape(shape)?)?
                    .broadcast_add(&shift.reshape(shape)?)?)
            }
        }
    }
}

fn update_running(x: &Tensor, running_mean: &Var, running_var: &Var) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    let values = x.detach().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let (mean, var) = fused::channel_stats(&values, n, c, h * w);
    let m = (n * h * w) as f64;
    let unbiased = m / (m - 1.0);
    let rm = running_mean.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let rv = running_var.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let nm: Vec<f64> = rm.iter().zip(&mean).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b).collect();
    let nv: Vec<f64> = rv
        .iter()
        .zip(&var)
        .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbiased)
        .collect();
    let dtype = running_mean.dtype();
    let device = x.device();
    running_mean.set(&Tensor::from_vec(nm, c, device)?.to_dtype(dtype)?)?;
    running_var.set(&Tensor::from_vec(nv, c, device)?.to_dtype(dtype)?)?;
    Ok(())
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form keeps both value and gradient finite for large |x|
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Mean over the two spatial axes: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(fused::upsample2x(x)?)
}

pub(crate) fn expect_dims(x: &Tensor, what: &str, channels: usize, h: usize, w: usize) -> Result<usize> {
    let (n, c, hh, ww) = x
        .dims4()
        .map_err(|_| Error::Contract(format!("{what} expects a 4-D batch, got {:?}", x.dims())))?;
    if (c, hh, ww) != (channels, h, w) {
        return Err(Error::Contract(format!(
            "{what} expects (N, {channels}, {h}, {w}), got {:?}",
            x.dims()
        )));
    }
    Ok(n)
}
