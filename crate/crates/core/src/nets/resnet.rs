//! ResNet-18 cut at the stage-2/stage-3 boundary.
//!
//! The encoder half is the stem plus stages 1 and 2 (no max pooling); the
//! classifier half is stages 3 and 4, global pooling and the linear head.

use candle_core::Tensor;

use super::layers::{global_avg_pool, Conv2d, Linear, Norm, NormKind};
use super::params::{Init, ParamBuilder};
use super::ModelConfig;
use crate::error::Result;

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl BasicBlock {
    fn new(pb: &ParamBuilder, cfg: &ModelConfig, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let bias = cfg.norm == NormKind::None;
        let residual_gamma = if cfg.zero_init_residual { 0.0 } else { 1.0 };
        let conv1 = Conv2d::same(&pb.pp("conv1"), in_ch, out_ch, 3, stride, bias)?;
        let norm1 = Norm::new(&pb.pp("norm1"), cfg.norm, out_ch, cfg.group_size, 1.0)?;
        let conv2 = if cfg.zero_init_residual && cfg.norm == NormKind::None {
            // without a norm layer the branch is silenced through its last conv
            let p = pb.pp("conv2");
            p.get("weight", &[out_ch, out_ch, 3, 3], Init::Const(0.0))?;
            Conv2d::same(&p, out_ch, out_ch, 3, 1, bias)?
        } else {
            Conv2d::same(&pb.pp("conv2"), out_ch, out_ch, 3, 1, bias)?
        };
        let norm2 = Norm::new(&pb.pp("norm2"), cfg.norm, out_ch, cfg.group_size, residual_gamma)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(&pb.pp("down"), in_ch, out_ch, 1, stride, 0, bias)?,
                Norm::new(&pb.pp("down_norm"), cfg.norm, out_ch, cfg.group_size, 1.0)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }

    fn output_size(&self, input: usize) -> usize {
        self.conv1.output_size(input)
    }
}

fn stage(pb: &ParamBuilder, cfg: &ModelConfig, blocks: usize, in_ch: usize, out_ch: usize, stride: usize) -> Result<Vec<BasicBlock>> {
    (0..blocks.max(1))
        .map(|i| {
            let (cin, s) = if i == 0 { (in_ch, stride) } else { (out_ch, 1) };
            BasicBlock::new(&pb.pp(&i.to_string()), cfg, cin, out_ch, s)
        })
        .collect()
}

fn run(blocks: &[BasicBlock], x: Tensor) -> Result<Tensor> {
    blocks.iter().try_fold(x, |acc, b| b.forward(&acc))
}

/// Stem and stages 1-2; produces the content (or attribute) feature map.
#[derive(Debug, Clone)]
pub struct EncoderHalf {
    stem: Conv2d,
    stem_norm: Norm,
    stage1: Vec<BasicBlock>,
    stage2: Vec<BasicBlock>,
}

impl EncoderHalf {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig, in_ch: usize) -> Result<Self> {
        let w = cfg.width;
        let bias = cfg.norm == NormKind::None;
        Ok(Self {
            stem: Conv2d::same(&pb.pp("stem"), in_ch, w, cfg.stem_kernel, cfg.stem_stride, bias)?,
            stem_norm: Norm::new(&pb.pp("stem_norm"), cfg.norm, w, cfg.group_size, 1.0)?,
            stage1: stage(&pb.pp("stage1"), cfg, cfg.blocks[0], w, w, 1)?,
            stage2: stage(&pb.pp("stage2"), cfg, cfg.blocks[1], w, 2 * w, 2)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.stem.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.stage2[0].conv1.out_channels()
    }

    /// Spatial size of the output for an input side of `input` pixels.
    pub fn output_size(&self, input: usize) -> usize {
        let s = self.stem.output_size(input);
        let s = self.stage1.iter().fold(s, |acc, b| b.output_size(acc));
        self.stage2.iter().fold(s, |acc, b| b.output_size(acc))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let y = run(&self.stage1, y)?;
        run(&self.stage2, y)
    }
}

/// Stages 3-4, global pooling and the linear head.
#[derive(Debug, Clone)]
pub struct ClassifierHalf {
    stage3: Vec<BasicBlock>,
    stage4: Vec<BasicBlock>,
    fc: Linear,
}

impl ClassifierHalf {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig, classes: usize) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            stage3: stage(&pb.pp("stage3"), cfg, cfg.blocks[2], 2 * w, 4 * w, 2)?,
            stage4: stage(&pb.pp("stage4"), cfg, cfg.blocks[3], 4 * w, 8 * w, 2)?,
            fc: Linear::new(&pb.pp("fc"), 8 * w, classes)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.in_dim()
    }

    /// Globally pooled representation feeding the linear head.
    pub fn embed(&self, z: &Tensor) -> Result<Tensor> {
        let y = run(&self.stage3, z.clone())?;
        let y = run(&self.stage4, y)?;
        global_avg_pool(&y)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.fc.forward(&self.embed(z)?)
    }

    pub fn head(&self) -> &Linear {
        &self.fc
    }
}
