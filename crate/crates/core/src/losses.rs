//! Loss terms and the combined objective.
//!
//! Every function returns a scalar tensor to be minimized and works for any
//! float dtype, so gradient checks can run in double precision.

use std::fmt;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor for the cosine terms.
pub const COSINE_EPS: f64 = 1e-8;

/// Gradient magnitude below which a frame pixel yields no pseudo event.
pub const EDGE_THRESHOLD: f32 = 0.05;

fn scalar_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_all()?.mean(0)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy_cls(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits
        .dims2()
        .map_err(|_| Error::Contract(format!("logits must be (N, K), got {:?}", logits.dims())))?;
    if n != labels.len() {
        return Err(Error::Argument(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Argument(format!("label {bad} outside [0, {k})")));
    }
    let mut onehot = vec![0f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    Ok(((log_probs * onehot)?.sum_all()? / -(n as f64))?)
}

/// Mean absolute difference.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("l1 shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    scalar_mean(&(a - b)?.abs()?)
}

/// Cycle-consistency penalty between two feature maps.
pub fn cycle_feature_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    l1_mean(a, b)
}

fn scores(x: &Tensor, what: &str) -> Result<Tensor> {
    let x = x.flatten_all()?;
    if x.dims()[0] == 0 {
        return Err(Error::Argument(format!("empty {what} score batch")));
    }
    Ok(x)
}

/// Relativistic average discriminator loss in minimization form:
/// `mean softplus(-(r - mean f)) + mean softplus(f - mean r)`.
pub fn relativistic_avg_disc_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = scores(real, "real")?;
    let f = scores(fake, "fake")?;
    let real_vs = r.broadcast_sub(&f.mean_keepdim(0)?)?;
    let fake_vs = f.broadcast_sub(&r.mean_keepdim(0)?)?;
    Ok((scalar_mean(&softplus(&real_vs.neg()?)?)? + scalar_mean(&softplus(&fake_vs)?)?)?)
}

/// Generator counterpart: the discriminator loss with the roles swapped.
pub fn relativistic_avg_gen_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    relativistic_avg_disc_loss(fake, real)
}

/// `beta * sum ||W^T W * (1 - I)||_F^2` over matrices reshaped to `(out, rest)`.
pub fn orthogonal_regularizer(weights: &[Tensor], beta: f64) -> Result<Tensor> {
    let (dtype, device) = weights
        .first()
        .map(|w| (w.dtype(), w.device().clone()))
        .unwrap_or((DType::F32, Device::Cpu));
    let mut total = Tensor::zeros((), dtype, &device)?;
    for w in weights {
        let out = w.dims().first().copied().unwrap_or(1);
        let m = w.reshape((out, ()))?;
        let cols = m.dims()[1];
        let gram = m.t()?.matmul(&m)?;
        let off = (Tensor::ones((cols, cols), dtype, &device)? - Tensor::eye(cols, dtype, &device)?)?;
        total = (total + (gram * off)?.sqr()?.sum_all()?)?;
    }
    Ok((total * beta)?)
}

fn as_rows(v: &Tensor) -> Result<Tensor> {
    match v.rank() {
        1 => Ok(v.unsqueeze(0)?),
        2 => Ok(v.clone()),
        _ => Ok(v.flatten_from(1)?),
    }
}

/// Row-wise cosine similarity with norms clamped at [`COSINE_EPS`].
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (a, b) = (as_rows(a)?, as_rows(b)?);
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("cosine shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let dot = (&a * &b)?.sum(D::Minus1)?;
    let floor = COSINE_EPS * COSINE_EPS;
    let na = a.sqr()?.sum(D::Minus1)?.clamp(floor, f64::INFINITY)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.clamp(floor, f64::INFINITY)?.sqrt()?;
    Ok((dot / (na * nb)?)?)
}

fn reject_zero_rows(v: &Tensor, what: &str) -> Result<()> {
    let norms = as_rows(v)?.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::NumericGuard(format!("{what} has a zero-norm row")));
    }
    Ok(())
}

/// Negative mean cosine similarity between two views; in `[-1, 1]`.
pub fn contrastive_alignment_loss(v: &Tensor, v2: &Tensor) -> Result<Tensor> {
    reject_zero_rows(v, "first view")?;
    reject_zero_rows(v2, "second view")?;
    contrastive_term(v, v2)
}

/// Mean absolute cosine similarity between attribute and content vectors; in `[0, 1]`.
pub fn uncorrelated_conditioning_loss(att: &Tensor, cont: &Tensor) -> Result<Tensor> {
    reject_zero_rows(att, "attribute vector")?;
    reject_zero_rows(cont, "content vector")?;
    uncorrelated_term(att, cont)
}

/// [`contrastive_alignment_loss`] relying on the norm clamp instead of
/// rejecting zero rows.
pub fn contrastive_term(v: &Tensor, v2: &Tensor) -> Result<Tensor> {
    Ok(scalar_mean(&cosine_rows(v, v2)?)?.neg()?)
}

pub fn uncorrelated_term(att: &Tensor, cont: &Tensor) -> Result<Tensor> {
    scalar_mean(&cosine_rows(att, cont)?.abs()?)
}

/// Edge-proxy event target for a batch of RGB frames `(N, 3, H, W)`:
/// thresholded grayscale gradient magnitude, scaled to unit max per sample and
/// replicated over `channels`.
pub fn pseudo_event_target(frames: &Tensor, channels: usize) -> Result<Tensor> {
    let (n, c, h, w) = frames.dims4()?;
    if c != 3 {
        return Err(Error::Contract(format!("expected RGB frames, got {c} channels")));
    }
    let px = frames.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(n * channels * h * w);
    for s in 0..n {
        let base = s * 3 * h * w;
        let gray: Vec<f32> = (0..h * w)
            .map(|i| 0.299 * px[base + i] + 0.587 * px[base + h * w + i] + 0.114 * px[base + 2 * h * w + i])
            .collect();
        let at = |y: usize, x: usize| gray[y * w + x];
        let mut mag = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) * 0.5;
                let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) * 0.5;
                let m = (gx * gx + gy * gy).sqrt();
                mag[y * w + x] = if m >= EDGE_THRESHOLD { m } else { 0.0 };
            }
        }
        let peak = mag.iter().cloned().fold(0f32, f32::max);
        if peak > 0.0 {
            mag.iter_mut().for_each(|m| *m /= peak);
        }
        for _ in 0..channels {
            out.extend_from_slice(&mag);
        }
    }
    Ok(Tensor::from_vec(out, (n, channels, h, w), frames.device())?.to_dtype(frames.dtype())?)
}

/// `mean|fake - target| + mean|cyc_fake - cyc_real|`, with `target` from
/// [`pseudo_event_target`]. `cycle` may be absent when no attribute encoder
/// is in use.
pub fn decoder_output_loss(fake: &Tensor, target: &Tensor, cycle: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    let t1 = l1_mean(fake, target)?;
    match cycle {
        Some((a, b)) => Ok((t1 + l1_mean(a, b)?)?),
        None => Ok(t1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Attribute-view contrastive term.
    pub lambda1: f64,
    /// Event-content-view contrastive term.
    pub lambda2: f64,
    /// Frame-content-view contrastive term.
    pub lambda3: f64,
    /// Attribute/content decorrelation term.
    pub lambda4: f64,
    pub w_cls_frame: f64,
    pub w_cls_fake: f64,
    pub w_decoder: f64,
    pub w_cyc_cont: f64,
    pub w_cyc_att: f64,
    pub w_gan_cont: f64,
    pub w_gan_event: f64,
    pub beta_orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            w_cls_frame: 1.0,
            w_cls_fake: 1.0,
            w_decoder: 1.0,
            w_cyc_cont: 1.0,
            w_cyc_att: 1.0,
            w_gan_cont: 1.0,
            w_gan_event: 1.0,
            beta_orth: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for term in Term::ALL {
            let w = term.weight(self);
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("weight for `{}` must be finite and >= 0, got {w}", term.name())));
            }
        }
        Ok(())
    }
}

/// Switches for ablations. A term runs only when its switch is on and its
/// weight is positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Off: frame classification only (source-only baseline).
    pub adaptation: bool,
    pub adversarial: bool,
    pub cycle: bool,
    pub decoder: bool,
    pub fake_cls: bool,
    pub attribute_encoder: bool,
    pub contrastive: bool,
    pub uncorrelated: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            adaptation: true,
            adversarial: true,
            cycle: true,
            decoder: true,
            fake_cls: true,
            attribute_encoder: true,
            contrastive: true,
            uncorrelated: true,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 8] = [
        "adaptation",
        "adversarial",
        "cycle",
        "decoder",
        "fake_cls",
        "attribute_encoder",
        "contrastive",
        "uncorrelated",
    ];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "adaptation" => &mut self.adaptation,
            "adversarial" => &mut self.adversarial,
            "cycle" => &mut self.cycle,
            "decoder" => &mut self.decoder,
            "fake_cls" => &mut self.fake_cls,
            "attribute_encoder" => &mut self.attribute_encoder,
            "contrastive" => &mut self.contrastive,
            "uncorrelated" => &mut self.uncorrelated,
            _ => {
                return Err(Error::Argument(format!(
                    "unknown toggle `{name}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    ClsFrame,
    ClsFake,
    Decoder,
    CycCont,
    CycAtt,
    GanCont,
    GanEvent,
    ContrastAtt,
    ContrastEventCont,
    ContrastFrame,
    Uncorrelated,
    DisCont,
    DisEvent,
    Orth,
}

impl Term {
    pub const ALL: [Term; 14] = [
        Term::ClsFrame,
        Term::ClsFake,
        Term::Decoder,
        Term::CycCont,
        Term::CycAtt,
        Term::GanCont,
        Term::GanEvent,
        Term::ContrastAtt,
        Term::ContrastEventCont,
        Term::ContrastFrame,
        Term::Uncorrelated,
        Term::DisCont,
        Term::DisEvent,
        Term::Orth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::ClsFrame => "cls_frame",
            Term::ClsFake => "cls_fake",
            Term::Decoder => "decoder",
            Term::CycCont => "cyc_cont",
            Term::CycAtt => "cyc_att",
            Term::GanCont => "gan_cont",
            Term::GanEvent => "gan_event",
            Term::ContrastAtt => "contrast_att",
            Term::ContrastEventCont => "contrast_event_cont",
            Term::ContrastFrame => "contrast_frame",
            Term::Uncorrelated => "uncorrelated",
            Term::DisCont => "dis_cont",
            Term::DisEvent => "dis_event",
            Term::Orth => "orth",
        }
    }

    pub fn side(self) -> Side {
        match self {
            Term::DisCont | Term::DisEvent | Term::Orth => Side::Discriminator,
            _ => Side::Generator,
        }
    }

    /// Multiplier in the total. `Orth` carries its own `beta`, applied inside
    /// [`orthogonal_regularizer`], so its multiplier is 1 once enabled.
    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Term::ClsFrame => w.w_cls_frame,
            Term::ClsFake => w.w_cls_fake,
            Term::Decoder => w.w_decoder,
            Term::CycCont => w.w_cyc_cont,
            Term::CycAtt => w.w_cyc_att,
            Term::GanCont | Term::DisCont => w.w_gan_cont,
            Term::GanEvent | Term::DisEvent => w.w_gan_event,
            Term::ContrastAtt => w.lambda1,
            Term::ContrastEventCont => w.lambda2,
            Term::ContrastFrame => w.lambda3,
            Term::Uncorrelated => w.lambda4,
            Term::Orth => w.beta_orth,
        }
    }

    fn multiplier(self, w: &LossWeights) -> f64 {
        if self == Term::Orth {
            1.0
        } else {
            self.weight(w)
        }
    }

    pub fn enabled(self, w: &LossWeights, t: &Toggles) -> bool {
        if self.weight(w) <= 0.0 {
            return false;
        }
        if self == Term::ClsFrame {
            return true;
        }
        if !t.adaptation {
            return false;
        }
        match self {
            Term::ClsFrame => true,
            Term::ClsFake => t.fake_cls,
            Term::Decoder => t.decoder,
            Term::CycCont => t.cycle,
            Term::CycAtt => t.cycle && t.attribute_encoder,
            Term::GanCont | Term::GanEvent | Term::DisCont | Term::DisEvent | Term::Orth => t.adversarial,
            Term::ContrastAtt => t.contrastive && t.attribute_encoder,
            Term::ContrastEventCont | Term::ContrastFrame => t.contrastive,
            Term::Uncorrelated => t.uncorrelated && t.attribute_encoder,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Computed scalar terms, keyed by [`Term`].
#[derive(Debug, Clone, Default)]
pub struct LossInputs {
    terms: Vec<(Term, Tensor)>,
}

impl LossInputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, term: Term, value: Tensor) {
        self.terms.retain(|(t, _)| *t != term);
        self.terms.push((term, value));
    }

    pub fn get(&self, term: Term) -> Option<&Tensor> {
        self.terms.iter().find(|(t, _)| *t == term).map(|(_, v)| v)
    }
}

/// Per-term values and the weighted totals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(Term, f64)>,
    pub generator_total: f64,
    pub discriminator_total: f64,
}

impl LossReport {
    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|(_, v)| *v)
    }

    pub fn contains(&self, term: Term) -> bool {
        self.get(term).is_some()
    }

    /// Weighted total of the listed terms on one side.
    pub fn recompute(&self, side: Side, w: &LossWeights) -> f64 {
        self.terms
            .iter()
            .filter(|(t, _)| t.side() == side)
            .map(|(t, v)| t.multiplier(w) * v)
            .sum()
    }

    pub fn merge(&mut self, other: LossReport) {
        for (t, v) in other.terms {
            self.terms.retain(|(u, _)| *u != t);
            self.terms.push((t, v));
        }
        self.terms.sort_by_key(|(t, _)| *t);
        self.generator_total += other.generator_total;
        self.discriminator_total += other.discriminator_total;
    }

    /// Fails on the first non-finite term or total.
    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (t, v) in &self.terms {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: t.name().to_string(),
                    step,
                });
            }
        }
        for (name, v) in [("generator_total", self.generator_total), ("discriminator_total", self.discriminator_total)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: name.to_string(),
                    step,
                });
            }
        }
        Ok(())
    }

    /// `step=<n> name=value ...`
    pub fn to_line(&self, step: u64) -> String {
        let mut s = format!("step={step}");
        for (t, v) in &self.terms {
            s.push_str(&format!(" {}={v:.9e}", t.name()));
        }
        s.push_str(&format!(
            " generator_total={:.9e} discriminator_total={:.9e}",
            self.generator_total, self.discriminator_total
        ));
        s
    }
}

/// Weighted total of the enabled terms on one side. Missing inputs for an
/// enabled term are a configuration error; inputs for disabled terms are
/// ignored. Returns `None` when no term on that side is enabled.
pub fn side_objective(side: Side, inputs: &LossInputs, w: &LossWeights, t: &Toggles) -> Result<(Option<Tensor>, LossReport)> {
    let mut total: Option<Tensor> = None;
    let mut report = LossReport::default();
    for term in Term::ALL.into_iter().filter(|x| x.side() == side && x.enabled(w, t)) {
        let value = inputs
            .get(term)
            .ok_or_else(|| Error::Config(format!("term `{term}` is enabled but its inputs are missing")))?;
        let value = value.flatten_all()?.sum_all()?;
        let host = value.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let weighted = (value * term.multiplier(w))?;
        total = Some(match total {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
        report.terms.push((term, host));
    }
    let sum = report.recompute(side, w);
    match side {
        Side::Generator => report.generator_total = sum,
        Side::Discriminator => report.discriminator_total = sum,
    }
    Ok((total, report))
}

/// Both totals plus the report. Sides without enabled terms total zero.
pub fn total_objective(inputs: &LossInputs, w: &LossWeights, t: &Toggles) -> Result<(Tensor, Tensor, LossReport)> {
    let (g, mut report) = side_objective(Side::Generator, inputs, w, t)?;
    let (d, dr) = side_objective(Side::Discriminator, inputs, w, t)?;
    report.merge(dr);
    let zero = || -> Result<Tensor> {
        let like = inputs.terms.first().map(|(_, v)| (v.dtype(), v.device().clone()));
        let (dtype, device) = like.unwrap_or((DType::F64, Device::Cpu));
        Ok(Tensor::zeros((), dtype, &device)?)
    };
    let g = match g {
        Some(g) => g,
        None => zero()?,
    };
    let d = match d {
        Some(d) => d,
        None => zero()?,
    };
    Ok((g, d, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cross_entropy_cls(&logits, &[0, 3]), Err(Error::Argument(_))));
        assert!(matches!(cross_entropy_cls(&logits, &[0]), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_saturates() {
        let logits = Tensor::new(&[[60f64, -60.0]], &Device::Cpu).unwrap();
        assert!(val(&cross_entropy_cls(&logits, &[0]).unwrap()) < 1e-12);
    }

    #[test]
    fn relativistic_losses_need_scores() {
        let empty = Tensor::zeros(0, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(relativistic_avg_disc_loss(&empty, &t(&[1.0])), Err(Error::Argument(_))));
        assert!(matches!(relativistic_avg_gen_loss(&t(&[1.0]), &empty), Err(Error::Argument(_))));
    }

    #[test]
    fn relativistic_saturation_goes_to_zero() {
        let loss = relativistic_avg_disc_loss(&t(&[500.0, 500.0]), &t(&[-500.0])).unwrap();
        assert!(val(&loss) < 1e-12);
    }

    #[test]
    fn cosine_guard_and_clamp() {
        let zero = t(&[0.0, 0.0]);
        let one = t(&[1.0, 0.0]);
        assert!(matches!(contrastive_alignment_loss(&zero, &one), Err(Error::NumericGuard(_))));
        assert!(matches!(uncorrelated_conditioning_loss(&one, &zero), Err(Error::NumericGuard(_))));
        let v = candle_core::Var::from_tensor(&zero).unwrap();
        let loss = contrastive_term(v.as_tensor(), &one).unwrap();
        assert_eq!(val(&loss), 0.0);
        let g = loss.backward().unwrap();
        let grad = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!(grad.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cycle_loss_contract() {
        assert!(matches!(cycle_feature_loss(&t(&[1.0]), &t(&[1.0, 2.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn flat_frame_gives_empty_target() {
        let frames = Tensor::full(0.3f64, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let target = pseudo_event_target(&frames, 4).unwrap();
        assert_eq!(target.dims(), &[2, 4, 4, 4]);
        assert_eq!(target.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn edge_target_has_unit_max() {
        let mut px = vec![0f64; 3 * 8 * 8];
        for c in 0..3 {
            for y in 0..8 {
                for x in 4..8 {
                    px[c * 64 + y * 8 + x] = 1.0;
                }
            }
        }
        let frames = Tensor::from_vec(px, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let target = pseudo_event_target(&frames, 2).unwrap();
        assert_eq!(target.max_all().unwrap().to_scalar::<f64>().unwrap(), 1.0);
        let row = target.get(0).unwrap().get(1).unwrap().get(3).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(row, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_enabled_input_is_config_error() {
        let w = LossWeights::default();
        let toggles = Toggles::default();
        let mut inputs = LossInputs::new();
        inputs.insert(Term::ClsFrame, t(&[1.0]));
        assert!(matches!(total_objective(&inputs, &w, &toggles), Err(Error::Config(_))));
    }

    #[test]
    fn source_only_reduces_to_frame_classification() {
        let w = LossWeights {
            w_cls_frame: 2.0,
            ..LossWeights::default()
        };
        let toggles = Toggles {
            adaptation: false,
            ..Toggles::default()
        };
        let mut inputs = LossInputs::new();
        inputs.insert(Term::ClsFrame, t(&[0.75]).squeeze(0).unwrap());
        let (g, d, report) = total_objective(&inputs, &w, &toggles).unwrap();
        assert_eq!(val(&g), 1.5);
        assert_eq!(val(&d), 0.0);
        assert_eq!(report.terms, vec![(Term::ClsFrame, 0.75)]);
        assert_eq!(report.generator_total, 1.5);
    }

    #[test]
    fn attribute_toggle_drops_dependent_terms() {
        let w = LossWeights::default();
        let toggles = Toggles {
            attribute_encoder: false,
            ..Toggles::default()
        };
        for term in [Term::CycAtt, Term::Uncorrelated, Term::ContrastAtt] {
            assert!(!term.enabled(&w, &toggles));
        }
        assert!(Term::CycCont.enabled(&w, &toggles));
    }

    #[test]
    fn zero_weight_disables() {
        let w = LossWeights {
            lambda4: 0.0,
            ..LossWeights::default()
        };
        assert!(!Term::Uncorrelated.enabled(&w, &Toggles::default()));
    }

    #[test]
    fn report_line_and_finiteness() {
        let report = LossReport {
            terms: vec![(Term::ClsFrame, 0.5), (Term::Orth, f64::NAN)],
            generator_total: 0.5,
            discriminator_total: f64::NAN,
        };
        assert!(report.to_line(3).starts_with("step=3 cls_frame=5.000000000e-1 orth=NaN"));
        match report.check_finite(3) {
            Err(Error::NonFinite { term, step }) => {
                assert_eq!(term, "orth");
                assert_eq!(step, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_toggle_is_rejected() {
        let mut t = Toggles::default();
        assert!(t.set("contrastive", false).is_ok());
        assert!(!t.contrastive);
        assert!(matches!(t.set("nope", true), Err(Error::Argument(_))));
    }
}
