//! The seven trainable networks and their shape contracts.
//!
//! Networks are plain functions of a [`ParamStore`]; the same store can be
//! rebuilt into a second `Networks` (for EMA shadows or checkpoint restores).

pub mod conv;
mod fused;
mod disc;
mod generator;
pub mod layers;
pub mod params;
mod projection;
mod resnet;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use disc::Discriminator;
pub use generator::{Decoder, Refiner};
pub use layers::NormKind;
pub use params::{BuildContext, Init, ParamBuilder, ParamStore};
pub use projection::{Head, Mlp, ProjectionConfig};
pub use resnet::{ClassifierHalf, EncoderHalf};

use crate::error::{Error, Result};
use crate::rng;
use layers::expect_dims;

pub const FRAME_CHANNELS: usize = 3;

/// Parameter-name prefixes updated in the generator phase.
pub const GENERATOR_GROUP: &[&str] = &[
    "frame_encoder",
    "event_content_encoder",
    "event_attribute_encoder",
    "classifier",
    "decoder",
    "refiner",
    "proj_content",
    "proj_attribute",
    "proj_shared",
];

/// Parameter-name prefixes updated in the discriminator phase.
pub const DISCRIMINATOR_GROUP: &[&str] = &["content_disc", "event_disc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: [usize; 4],
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub norm: NormKind,
    /// Channels per normalization group.
    pub group_size: usize,
    pub zero_init_residual: bool,
    pub decoder_width: usize,
    pub refiner_width: usize,
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::resnet18()
    }
}

impl ModelConfig {
    pub fn resnet18() -> Self {
        Self {
            width: 64,
            blocks: [2, 2, 2, 2],
            stem_kernel: 7,
            stem_stride: 2,
            norm: NormKind::Batch,
            group_size: 16,
            zero_init_residual: false,
            decoder_width: 64,
            refiner_width: 32,
            disc_width: 64,
        }
    }

    /// Narrow single-block variant for 32x32 desk-scale runs.
    pub fn toy() -> Self {
        Self {
            width: 8,
            blocks: [1, 1, 1, 1],
            stem_kernel: 3,
            stem_stride: 2,
            norm: NormKind::Batch,
            group_size: 4,
            zero_init_residual: false,
            decoder_width: 16,
            refiner_width: 8,
            disc_width: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("stem_kernel", self.stem_kernel),
            ("stem_stride", self.stem_stride),
            ("group_size", self.group_size),
            ("decoder_width", self.decoder_width),
            ("refiner_width", self.refiner_width),
            ("disc_width", self.disc_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("model.stem_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Channels of the content (and attribute) map.
    pub fn content_channels(&self) -> usize {
        2 * self.width
    }
}

/// Input geometry shared by both domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub classes: usize,
}

impl NetShape {
    pub fn event_channels(&self) -> usize {
        2 * self.bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    FrameContent,
    EventContent,
    EventAttribute,
}

/// Encoder output, tagged with the encoder that produced it.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn detach(&self) -> Self {
        Self {
            tensor: self.tensor.detach(),
            kind: self.kind,
        }
    }

    fn require_content(&self, what: &str) -> Result<()> {
        if self.kind == FeatureKind::EventAttribute {
            return Err(Error::Contract(format!("{what} expects a content map, got an attribute map")));
        }
        Ok(())
    }
}

/// Pooled representation `(N, D)` used by the cosine losses.
pub type PooledFeature = Tensor;

#[derive(Debug, Clone)]
struct Projections {
    content: Option<Mlp>,
    attribute: Option<Mlp>,
}

#[derive(Debug, Clone)]
pub struct Networks {
    config: ModelConfig,
    projection: ProjectionConfig,
    shape: NetShape,
    content_size: (usize, usize),
    store: ParamStore,
    frame_encoder: EncoderHalf,
    event_content_encoder: EncoderHalf,
    event_attribute_encoder: EncoderHalf,
    classifier: ClassifierHalf,
    decoder: Decoder,
    refiner: Refiner,
    content_disc: Discriminator,
    event_disc: Discriminator,
    proj: Projections,
    training: Arc<AtomicBool>,
}

impl Networks {
    /// Freshly initialized networks; every draw derives from `seed`.
    pub fn new(config: &ModelConfig, projection: &ProjectionConfig, shape: NetShape, seed: u64, dtype: DType) -> Result<Self> {
        let rng = rng::Rng::seed_from_u64(rng::derive(seed, &[rng::tag::INIT]));
        Self::build(config, projection, shape, BuildContext::fresh(rng, dtype, Device::Cpu))
    }

    /// Networks over an existing store; names and shapes must match.
    pub fn from_store(config: &ModelConfig, projection: &ProjectionConfig, shape: NetShape, store: ParamStore) -> Result<Self> {
        let dtype = store
            .iter()
            .next()
            .map(|(_, v)| v.dtype())
            .ok_or_else(|| Error::Checkpoint("empty parameter store".into()))?;
        let expected = store.len();
        let nets = Self::build(config, projection, shape, BuildContext::existing(store, dtype, Device::Cpu))?;
        if nets.store.len() != expected {
            return Err(Error::Checkpoint(format!(
                "store holds {expected} tensors but the networks use {}",
                nets.store.len()
            )));
        }
        Ok(nets)
    }

    fn build(config: &ModelConfig, projection: &ProjectionConfig, shape: NetShape, ctx: BuildContext) -> Result<Self> {
        config.validate()?;
        projection.validate()?;
        if shape.classes < 2 || shape.bins == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::Config(format!("invalid network geometry {shape:?}")));
        }
        if shape.height % 4 != 0 || shape.width % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be divisible by 4",
                shape.height, shape.width
            )));
        }
        let root = ctx.root();
        let ec = shape.event_channels();
        let frame_encoder = EncoderHalf::new(&root.pp("frame_encoder"), config, FRAME_CHANNELS)?;
        let event_content_encoder = EncoderHalf::new(&root.pp("event_content_encoder"), config, ec)?;
        let event_attribute_encoder = EncoderHalf::new(&root.pp("event_attribute_encoder"), config, ec)?;
        let content_size = (
            frame_encoder.output_size(shape.height),
            frame_encoder.output_size(shape.width),
        );
        if content_size.0 == 0 || content_size.1 == 0 {
            return Err(Error::Config("resolution too small for the encoder".into()));
        }
        let upsamplings = upsampling_steps(shape.height, content_size.0)?;
        if upsampling_steps(shape.width, content_size.1)? != upsamplings {
            return Err(Error::Config("encoder must downsample both axes equally".into()));
        }
        let cz = config.content_channels();
        let classifier = ClassifierHalf::new(&root.pp("classifier"), config, shape.classes)?;
        let decoder = Decoder::new(&root.pp("decoder"), config, 2 * cz, ec, upsamplings)?;
        let refiner = Refiner::new(&root.pp("refiner"), config, ec, FRAME_CHANNELS)?;
        let content_disc = Discriminator::new(&root.pp("content_disc"), cz, config.disc_width)?;
        let event_disc = Discriminator::new(&root.pp("event_disc"), ec, config.disc_width)?;
        let proj = if projection.head == Head::Mlp {
            let mk = |name: &str| Mlp::new(&root.pp(name), cz, projection.mlp_hidden, projection.mlp_out);
            if projection.shared_mlp {
                let m = mk("proj_shared")?;
                Projections {
                    content: Some(m.clone()),
                    attribute: Some(m),
                }
            } else {
                Projections {
                    content: Some(mk("proj_content")?),
                    attribute: Some(mk("proj_attribute")?),
                }
            }
        } else {
            Projections {
                content: None,
                attribute: None,
            }
        };
        drop(root);
        let training = ctx.training_flag();
        Ok(Self {
            config: config.clone(),
            projection: projection.clone(),
            shape,
            content_size,
            store: ctx.into_store(),
            frame_encoder,
            event_content_encoder,
            event_attribute_encoder,
            classifier,
            decoder,
            refiner,
            content_disc,
            event_disc,
            proj,
            training,
        })
    }

    /// Switches batch-normalization layers between batch and running statistics.
    pub fn set_training(&self, training: bool) {
        self.training.store(training, Ordering::Relaxed);
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::Relaxed)
    }

    /// Runs `f` in evaluation mode and restores the previous mode.
    pub fn evaluating<T>(&self, f: impl FnOnce() -> T) -> T {
        let previous = self.is_training();
        self.set_training(false);
        let out = f();
        self.set_training(previous);
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn projection(&self) -> &ProjectionConfig {
        &self.projection
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.shape.classes
    }

    pub fn dtype(&self) -> DType {
        self.store.iter().next().map(|(_, v)| v.dtype()).unwrap_or(DType::F32)
    }

    /// `(C_z, H_z, W_z)` of content and attribute maps.
    pub fn content_shape(&self) -> (usize, usize, usize) {
        (self.config.content_channels(), self.content_size.0, self.content_size.1)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn generator_params(&self) -> ParamStore {
        self.store.subset(GENERATOR_GROUP)
    }

    pub fn discriminator_params(&self) -> ParamStore {
        self.store.subset(DISCRIMINATOR_GROUP)
    }

    pub fn encode_frame_content(&self, frames: &Tensor) -> Result<FeatureMap> {
        expect_dims(frames, "frame encoder", FRAME_CHANNELS, self.shape.height, self.shape.width)?;
        Ok(FeatureMap {
            tensor: self.frame_encoder.forward(frames)?,
            kind: FeatureKind::FrameContent,
        })
    }

    pub fn encode_event_content(&self, events: &Tensor) -> Result<FeatureMap> {
        self.check_events(events, "event content encoder")?;
        Ok(FeatureMap {
            tensor: self.event_content_encoder.forward(events)?,
            kind: FeatureKind::EventContent,
        })
    }

    pub fn encode_event_attribute(&self, events: &Tensor) -> Result<FeatureMap> {
        self.check_events(events, "event attribute encoder")?;
        Ok(FeatureMap {
            tensor: self.event_attribute_encoder.forward(events)?,
            kind: FeatureKind::EventAttribute,
        })
    }

    /// Logits `(N, K)`.
    pub fn classify(&self, z: &FeatureMap) -> Result<Tensor> {
        self.check_content(z, "classifier")?;
        self.classifier.forward(&z.tensor)
    }

    /// Pooled pre-logit representation `(N, 8w)`.
    pub fn embed(&self, z: &FeatureMap) -> Result<Tensor> {
        self.check_content(z, "classifier")?;
        self.classifier.embed(&z.tensor)
    }

    pub fn decode_fake_event(&self, content: &FeatureMap, attribute: &FeatureMap) -> Result<Tensor> {
        self.check_content(content, "decoder")?;
        if attribute.kind != FeatureKind::EventAttribute {
            return Err(Error::Contract("decoder expects an attribute map as second input".into()));
        }
        let (c, h, w) = self.content_shape();
        let n = expect_dims(&attribute.tensor, "decoder attribute", c, h, w)?;
        if n != content.batch() {
            return Err(Error::Contract(format!(
                "decoder batch mismatch: content {} vs attribute {n}",
                content.batch()
            )));
        }
        let x = Tensor::cat(&[&content.tensor, &attribute.tensor], 1)?;
        self.decoder.forward(&x)
    }

    pub fn refine(&self, fake: &Tensor, frames: &Tensor) -> Result<Tensor> {
        let n = self.check_events(fake, "refiner")?;
        let m = expect_dims(frames, "refiner frame", FRAME_CHANNELS, self.shape.height, self.shape.width)?;
        if n != m {
            return Err(Error::Contract(format!("refiner batch mismatch: fake {n} vs frames {m}")));
        }
        self.refiner.forward(fake, frames)
    }

    /// One logit per sample.
    pub fn discriminate_content(&self, z: &FeatureMap) -> Result<Tensor> {
        self.check_content(z, "content discriminator")?;
        self.content_disc.forward(&z.tensor)
    }

    pub fn discriminate_event(&self, events: &Tensor) -> Result<Tensor> {
        self.check_events(events, "event discriminator")?;
        self.event_disc.forward(events)
    }

    /// Discriminator weights subject to the orthogonality penalty.
    pub fn orth_weights(&self) -> Vec<Tensor> {
        let mut w = self.content_disc.weight_matrices();
        w.extend(self.event_disc.weight_matrices());
        w
    }

    pub fn pool_features(&self, z: &FeatureMap) -> Result<PooledFeature> {
        let (c, h, w) = self.content_shape();
        expect_dims(&z.tensor, "pool_features", c, h, w)?;
        let mlp = match z.kind {
            FeatureKind::EventAttribute => self.proj.attribute.as_ref(),
            _ => self.proj.content.as_ref(),
        };
        projection::pool(&z.tensor, self.projection.head, mlp)
    }

    fn check_events(&self, x: &Tensor, what: &str) -> Result<usize> {
        expect_dims(x, what, self.shape.event_channels(), self.shape.height, self.shape.width)
    }

    fn check_content(&self, z: &FeatureMap, what: &str) -> Result<usize> {
        z.require_content(what)?;
        let (c, h, w) = self.content_shape();
        expect_dims(&z.tensor, what, c, h, w)
    }
}

fn upsampling_steps(input: usize, output: usize) -> Result<usize> {
    let ratio = input / output;
    if ratio * output != input || !ratio.is_power_of_two() {
        return Err(Error::Config(format!(
            "input size {input} is not a power-of-two multiple of the content size {output}"
        )));
    }
    Ok(ratio.trailing_zeros() as usize)
}

/// Spatial mean of a feature map, `(N, C, H, W) -> (N, C)`.
pub fn avg_pool(z: &Tensor) -> Result<Tensor> {
    projection::pool(z, Head::AvgPool, None)
}

/// `shadow <- decay * shadow + (1 - decay) * live` for every shadow entry.
pub fn ema_update(shadow: &ParamStore, live: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Argument(format!("ema decay must lie in [0, 1], got {decay}")));
    }
    for (name, s) in shadow.iter() {
        let l = live
            .get(name)
            .ok_or_else(|| Error::Contract(format!("live parameters lack `{name}`")))?;
        if l.dims() != s.dims() {
            return Err(Error::Contract(format!(
                "`{name}` has shadow shape {:?} but live shape {:?}",
                s.dims(),
                l.dims()
            )));
        }
        let next = ((s.as_tensor() * decay)? + (l.as_tensor().detach() * (1.0 - decay))?)?;
        s.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> NetShape {
        NetShape {
            height: 16,
            width: 16,
            bins: 2,
            classes: 3,
        }
    }

    fn nets(dtype: DType) -> Networks {
        Networks::new(&ModelConfig::toy(), &ProjectionConfig::default(), shape(), 7, dtype).unwrap()
    }

    fn random(dims: &[usize], seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::rng_for(seed, &[]);
        let n: usize = dims.iter().product();
        Tensor::from_vec((0..n).map(|_| r.gen::<f64>()).collect::<Vec<_>>(), dims, &Device::Cpu).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.flatten_from(1).unwrap().to_vec2::<f64>().unwrap()
    }

    fn permute(t: &Tensor, order: &[u32]) -> Tensor {
        let idx = Tensor::new(order, &Device::Cpu).unwrap();
        t.index_select(&idx, 0).unwrap()
    }

    fn assert_rows_close(a: &[Vec<f64>], b: &[Vec<f64>]) {
        for (x, y) in a.iter().zip(b) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn content_maps_share_a_shape_and_stay_finite() {
        let n = nets(DType::F64);
        let zf = n.encode_frame_content(&Tensor::zeros((2, 3, 16, 16), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let ze = n.encode_event_content(&Tensor::zeros((2, 4, 16, 16), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let za = n.encode_event_attribute(&random(&[2, 4, 16, 16], 1)).unwrap();
        assert_eq!(zf.tensor.dims(), ze.tensor.dims());
        assert_eq!(zf.tensor.dims(), &[2, 16, 4, 4]);
        for z in [&zf, &ze, &za] {
            assert!(rows(&z.tensor).iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_init_residual_keeps_outputs_finite() {
        for norm in [NormKind::Batch, NormKind::Group, NormKind::None] {
            let cfg = ModelConfig {
                zero_init_residual: true,
                norm,
                ..ModelConfig::toy()
            };
            let n = Networks::new(&cfg, &ProjectionConfig::default(), shape(), 1, DType::F64).unwrap();
            let z = n.encode_frame_content(&Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap()).unwrap();
            assert!(rows(&z.tensor).iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn every_network_is_batch_permutation_equivariant() {
        let n = nets(DType::F64);
        let order = [2u32, 0, 1];
        let frames = random(&[3, 3, 16, 16], 2);
        let events = random(&[3, 4, 16, 16], 3);
        let zf = n.encode_frame_content(&frames).unwrap();
        let za = n.encode_event_attribute(&events).unwrap();
        let fake = n.decode_fake_event(&zf, &za).unwrap();
        let outputs = |f: &Tensor, e: &Tensor| -> Vec<Tensor> {
            let zf = n.encode_frame_content(f).unwrap();
            let ze = n.encode_event_content(e).unwrap();
            let za = n.encode_event_attribute(e).unwrap();
            let fake = n.decode_fake_event(&zf, &za).unwrap();
            vec![
                zf.tensor.clone(),
                ze.tensor.clone(),
                za.tensor.clone(),
                n.classify(&zf).unwrap(),
                fake.clone(),
                n.refine(&fake, f).unwrap(),
                n.discriminate_content(&ze).unwrap().unsqueeze(1).unwrap(),
                n.discriminate_event(e).unwrap().unsqueeze(1).unwrap(),
            ]
        };
        let base = outputs(&frames, &events);
        let perm = outputs(&permute(&frames, &order), &permute(&events, &order));
        for (a, b) in base.iter().zip(&perm) {
            assert_rows_close(&rows(&permute(a, &order)), &rows(b));
        }
        assert_eq!(fake.dims(), &[3, 4, 16, 16]);
    }

    #[test]
    fn classifier_outputs_a_distribution() {
        let n = nets(DType::F64);
        let frames = random(&[2, 3, 16, 16], 4);
        let dup = Tensor::cat(&[&frames, &frames.narrow(0, 0, 1).unwrap()], 0).unwrap();
        let logits = n.classify(&n.encode_frame_content(&dup).unwrap()).unwrap();
        let p = candle_core::Tensor::exp(&logits.broadcast_sub(&logits.max_keepdim(1).unwrap()).unwrap()).unwrap();
        let p = p.broadcast_div(&p.sum_keepdim(1).unwrap()).unwrap();
        for row in rows(&p) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let l = rows(&logits);
        assert_eq!(l[0], l[2]);
    }

    #[test]
    fn class_count_sets_the_head() {
        for k in [101, 10] {
            let s = NetShape { classes: k, ..shape() };
            let n = Networks::new(&ModelConfig::toy(), &ProjectionConfig::default(), s, 0, DType::F32).unwrap();
            let z = n.encode_frame_content(&Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
            assert_eq!(n.classify(&z).unwrap().dims(), &[2, k]);
        }
    }

    #[test]
    fn contracts_reject_wrong_inputs() {
        let n = nets(DType::F32);
        let events = Tensor::zeros((2, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let za = n.encode_event_attribute(&events).unwrap();
        assert!(matches!(n.classify(&za), Err(Error::Contract(_))));
        assert!(matches!(n.discriminate_content(&za), Err(Error::Contract(_))));
        assert!(matches!(
            n.encode_frame_content(&Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap()),
            Err(Error::Contract(_))
        ));
        assert!(matches!(n.encode_event_content(&events.narrow(1, 0, 3).unwrap()), Err(Error::Contract(_))));
        let zf = n.encode_frame_content(&Tensor::zeros((3, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(n.decode_fake_event(&zf, &za), Err(Error::Contract(_))));
        assert!(matches!(n.decode_fake_event(&zf, &zf), Err(Error::Contract(_))));
        assert!(!n.orth_weights().is_empty());
    }

    #[test]
    fn resolution_must_be_a_power_of_two_multiple() {
        let s = NetShape {
            height: 24,
            width: 24,
            ..shape()
        };
        let cfg = ModelConfig {
            stem_stride: 3,
            ..ModelConfig::toy()
        };
        assert!(matches!(
            Networks::new(&cfg, &ProjectionConfig::default(), s, 0, DType::F32),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradients_reach_decoder_and_refiner_inputs() {
        let n = nets(DType::F64);
        let (c, h, w) = n.content_shape();
        let content = candle_core::Var::from_tensor(&random(&[1, c, h, w], 5)).unwrap();
        let attribute = candle_core::Var::from_tensor(&random(&[1, c, h, w], 6)).unwrap();
        let frame = candle_core::Var::from_tensor(&random(&[1, 3, 16, 16], 7)).unwrap();
        let f = |cv: &Tensor, av: &Tensor, fv: &Tensor| -> Tensor {
            let zf = FeatureMap {
                tensor: cv.clone(),
                kind: FeatureKind::FrameContent,
            };
            let za = FeatureMap {
                tensor: av.clone(),
                kind: FeatureKind::EventAttribute,
            };
            let fake = n.decode_fake_event(&zf, &za).unwrap();
            n.refine(&fake, fv).unwrap().sum_all().unwrap()
        };
        let out = f(content.as_tensor(), attribute.as_tensor(), frame.as_tensor());
        let grads = out.backward().unwrap();
        let h_step = 1e-6;
        for (var, name) in [(&content, "content"), (&attribute, "attribute"), (&frame, "frame")] {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(g.iter().any(|v| v.abs() > 1e-8), "{name} receives no gradient");
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let i = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap();
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap();
                let (cv, av, fv) = match name {
                    "content" => (t, attribute.as_tensor().clone(), frame.as_tensor().clone()),
                    "attribute" => (content.as_tensor().clone(), t, frame.as_tensor().clone()),
                    _ => (content.as_tensor().clone(), attribute.as_tensor().clone(), t),
                };
                f(&cv, &av, &fv).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h_step) - eval(-h_step)) / (2.0 * h_step);
            let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs());
            assert!(rel < 1e-4, "{name}: analytic {} numeric {numeric}", g[i]);
        }
    }

    #[test]
    fn avg_pool_examples() {
        let n = nets(DType::F64);
        let (c, h, w) = n.content_shape();
        let z = FeatureMap {
            tensor: Tensor::full(0.25f64, (1, c, h, w), &Device::Cpu).unwrap(),
            kind: FeatureKind::FrameContent,
        };
        assert!(rows(&n.pool_features(&z).unwrap())[0].iter().all(|&v| v == 0.25));
        let quad = Tensor::new(&[[[[1f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        assert_eq!(avg_pool(&quad).unwrap().to_vec2::<f64>().unwrap(), vec![vec![2.5]]);
        let flat = projection::pool(&z.tensor, Head::None, None).unwrap();
        assert_eq!(flat.dims(), &[1, c * h * w]);
    }

    #[test]
    fn avg_pool_is_linear() {
        let a = random(&[2, 3, 4, 4], 8);
        let b = random(&[2, 3, 4, 4], 9);
        let lhs = avg_pool(&((&a * 2.0).unwrap() + (&b * -0.5).unwrap()).unwrap()).unwrap();
        let rhs = ((avg_pool(&a).unwrap() * 2.0).unwrap() + (avg_pool(&b).unwrap() * -0.5).unwrap()).unwrap();
        assert_rows_close(&rows(&lhs), &rows(&rhs));
    }

    #[test]
    fn mlp_heads_follow_the_config() {
        let proj = ProjectionConfig {
            head: Head::Mlp,
            mlp_hidden: 8,
            mlp_out: 5,
            ..ProjectionConfig::default()
        };
        let n = Networks::new(&ModelConfig::toy(), &proj, shape(), 0, DType::F32).unwrap();
        assert!(n.store().names().any(|k| k.starts_with("proj_attribute.")));
        let z = n.encode_frame_content(&Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(n.pool_features(&z).unwrap().dims(), &[2, 5]);
        let shared = ProjectionConfig {
            shared_mlp: true,
            ..proj
        };
        let n = Networks::new(&ModelConfig::toy(), &shared, shape(), 0, DType::F32).unwrap();
        assert!(n.store().names().any(|k| k.starts_with("proj_shared.")));
        assert!(!n.store().names().any(|k| k.starts_with("proj_content.")));
        let bad = ProjectionConfig {
            momentum_encoder: true,
            ..ProjectionConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ema_examples() {
        let mk = |v: f64| {
            let mut s = ParamStore::new();
            s.insert("w", candle_core::Var::new(&[v], &Device::Cpu).unwrap());
            s
        };
        let value = |s: &ParamStore| s.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0];
        let shadow = mk(0.0);
        ema_update(&shadow, &mk(1.0), 0.9).unwrap();
        assert!((value(&shadow) - 0.1).abs() < 1e-15);
        let shadow = mk(0.3);
        ema_update(&shadow, &mk(1.0), 1.0).unwrap();
        assert_eq!(value(&shadow), 0.3);
        ema_update(&shadow, &mk(1.0), 0.0).unwrap();
        assert_eq!(value(&shadow), 1.0);
        let mut wrong = ParamStore::new();
        wrong.insert("w", candle_core::Var::new(&[1f64, 2.0], &Device::Cpu).unwrap());
        assert!(matches!(ema_update(&shadow, &wrong, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn rebuilding_from_a_store_reuses_parameters() {
        let a = nets(DType::F32);
        let b = Networks::from_store(a.config(), a.projection(), a.shape(), a.store().deep_copy().unwrap()).unwrap();
        assert_eq!(a.store().fingerprint().unwrap(), b.store().fingerprint().unwrap());
        let generator = a.generator_params();
        let discriminator = a.discriminator_params();
        assert_eq!(generator.len() + discriminator.len(), a.store().len());
    }
}
