use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, Linear};
use super::params::ParamBuilder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Flattened map.
    None,
    AvgPool,
    /// Spatial mean followed by a two-layer perceptron.
    Mlp,
}

/// How feature maps become vectors for the cosine losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub head: Head,
    /// The second view is encoded by an EMA copy of the encoder.
    pub momentum_encoder: bool,
    /// The second view is projected by an EMA copy of the MLP.
    pub momentum_mlp: bool,
    /// One MLP for content and attribute vectors instead of one each.
    pub shared_mlp: bool,
    pub ema_decay: Option<f64>,
    pub mlp_hidden: usize,
    pub mlp_out: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            head: Head::AvgPool,
            momentum_encoder: false,
            momentum_mlp: false,
            shared_mlp: false,
            ema_decay: None,
            mlp_hidden: 128,
            mlp_out: 64,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.momentum_encoder || self.momentum_mlp {
            match self.ema_decay {
                Some(d) if d > 0.0 && d < 1.0 => {}
                Some(d) => return Err(Error::Config(format!("ema_decay must lie in (0, 1), got {d}"))),
                None => return Err(Error::Config("momentum projection requires ema_decay".into())),
            }
        }
        if self.momentum_mlp && self.head != Head::Mlp {
            return Err(Error::Config("momentum_mlp requires head = \"mlp\"".into()));
        }
        if self.head == Head::Mlp && (self.mlp_hidden == 0 || self.mlp_out == 0) {
            return Err(Error::Config("mlp sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_momentum(&self) -> bool {
        self.momentum_encoder || self.momentum_mlp
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), input, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, output)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// `(N, C, H, W) -> (N, D)` according to `head`.
pub(crate) fn pool(z: &Tensor, head: Head, mlp: Option<&Mlp>) -> Result<Tensor> {
    match head {
        Head::None => Ok(z.flatten_from(1)?),
        Head::AvgPool => global_avg_pool(z),
        Head::Mlp => {
            let mlp = mlp.ok_or_else(|| Error::Contract("mlp head requested but not built".into()))?;
            mlp.forward(&global_avg_pool(z)?)
        }
    }
}
