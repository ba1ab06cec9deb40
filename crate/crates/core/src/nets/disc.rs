use candle_core::Tensor;

use super::layers::{global_avg_pool, leaky_relu, Conv2d, Linear};
use super::params::ParamBuilder;
use crate::error::Result;

const SLOPE: f64 = 0.2;

/// Three stride-2 convolutions and a linear head; one logit per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn new(pb: &ParamBuilder, in_ch: usize, width: usize) -> Result<Self> {
        let chans = [in_ch, width, 2 * width, 4 * width];
        let convs = (0..3)
            .map(|i| Conv2d::same(&pb.pp(&format!("conv{i}")), chans[i], chans[i + 1], 3, 2, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            head: Linear::new(&pb.pp("head"), 4 * width, 1)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for c in &self.convs {
            y = leaky_relu(&c.forward(&y)?, SLOPE)?;
        }
        Ok(self.head.forward(&global_avg_pool(&y)?)?.squeeze(1)?)
    }

    /// Every weight matrix, for the orthogonality penalty.
    pub fn weight_matrices(&self) -> Vec<Tensor> {
        self.convs
            .iter()
            .map(|c| c.weight().as_tensor().clone())
            .chain(std::iter::once(self.head.weight().as_tensor().clone()))
            .collect()
    }
}
