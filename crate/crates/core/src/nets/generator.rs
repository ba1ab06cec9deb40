//! Fake-event synthesis: decoder and refinement network.

use candle_core::Tensor;

use super::layers::{sigmoid, upsample2x, Conv2d, Norm, NormKind};
use super::params::ParamBuilder;
use super::ModelConfig;
use crate::error::{Error, Result};

const DECODER_BLOCKS: usize = 4;

/// Four conv blocks over the channel-concatenated (content, attribute) maps.
/// The first `upsamplings` blocks double the resolution.
#[derive(Debug, Clone)]
pub struct Decoder {
    blocks: Vec<(Conv2d, Norm, bool)>,
    out: Conv2d,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig, in_ch: usize, out_ch: usize, upsamplings: usize) -> Result<Self> {
        if upsamplings > DECODER_BLOCKS {
            return Err(Error::Contract(format!(
                "decoder has {DECODER_BLOCKS} blocks but needs {upsamplings} upsamplings"
            )));
        }
        let w = cfg.decoder_width;
        let bias = cfg.norm == NormKind::None;
        let mut blocks = Vec::with_capacity(DECODER_BLOCKS);
        for i in 0..DECODER_BLOCKS {
            let p = pb.pp(&format!("block{i}"));
            let cin = if i == 0 { in_ch } else { w };
            blocks.push((
                Conv2d::same(&p.pp("conv"), cin, w, 3, 1, bias)?,
                Norm::new(&p.pp("norm"), cfg.norm, w, cfg.group_size, 1.0)?,
                i < upsamplings,
            ));
        }
        Ok(Self {
            blocks,
            out: Conv2d::same(&pb.pp("out"), w, out_ch, 3, 1, true)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].0.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for (conv, norm, up) in &self.blocks {
            if *up {
                y = upsample2x(&y)?;
            }
            y = norm.forward(&conv.forward(&y)?)?.relu()?;
        }
        sigmoid(&self.out.forward(&y)?)
    }
}

/// Three-level encoder-decoder with skip connections over
/// `concat(fake event, frame)`.
#[derive(Debug, Clone)]
pub struct Refiner {
    enc1: (Conv2d, Norm),
    enc2: (Conv2d, Norm),
    enc3: (Conv2d, Norm),
    dec2: (Conv2d, Norm),
    dec1: (Conv2d, Norm),
    out: Conv2d,
}

impl Refiner {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig, event_ch: usize, frame_ch: usize) -> Result<Self> {
        let r = cfg.refiner_width;
        let bias = cfg.norm == NormKind::None;
        let unit = |name: &str, cin: usize, cout: usize, stride: usize| -> Result<(Conv2d, Norm)> {
            let p = pb.pp(name);
            Ok((
                Conv2d::same(&p.pp("conv"), cin, cout, 3, stride, bias)?,
                Norm::new(&p.pp("norm"), cfg.norm, cout, cfg.group_size, 1.0)?,
            ))
        };
        Ok(Self {
            enc1: unit("enc1", event_ch + frame_ch, r, 1)?,
            enc2: unit("enc2", r, 2 * r, 2)?,
            enc3: unit("enc3", 2 * r, 4 * r, 2)?,
            dec2: unit("dec2", 4 * r + 2 * r, 2 * r, 1)?,
            dec1: unit("dec1", 2 * r + r, r, 1)?,
            out: Conv2d::same(&pb.pp("out"), r, event_ch, 1, 1, true)?,
        })
    }

    pub fn forward(&self, fake: &Tensor, frame: &Tensor) -> Result<Tensor> {
        let apply = |(conv, norm): &(Conv2d, Norm), x: &Tensor| -> Result<Tensor> {
            Ok(norm.forward(&conv.forward(x)?)?.relu()?)
        };
        let x = Tensor::cat(&[fake, frame], 1)?;
        let e1 = apply(&self.enc1, &x)?;
        let e2 = apply(&self.enc2, &e1)?;
        let e3 = apply(&self.enc3, &e2)?;
        let d2 = apply(&self.dec2, &Tensor::cat(&[&upsample2x(&e3)?, &e2], 1)?)?;
        let d1 = apply(&self.dec1, &Tensor::cat(&[&upsample2x(&d2)?, &e1], 1)?)?;
        sigmoid(&self.out.forward(&d1)?)
    }
}
