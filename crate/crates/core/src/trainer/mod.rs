//! Alternating adversarial optimization.
//!
//! Each step runs the generator-side networks once, then
//! 1. updates the discriminators on detached features (phase A), and
//! 2. re-scores the live features with the updated discriminators and
//!    updates every generator-side network (phase B).

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

pub use config::{OptimConfig, Precision, RunConfig, TrainConfig};

use crate::datasets::{load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::frame_core::{two_view, Sample};
use crate::grid::{self, Grid};
use crate::losses::{self, LossInputs, LossReport, Side, Term};
use crate::nets::{ema_update, FeatureKind, FeatureMap, NetShape, Networks};
use crate::optim::RAdam;
use crate::rng::{self, tag};
use checkpoint::CheckpointManifest;

pub const METRICS_FILE: &str = "metrics.log";
pub const EPOCHS_FILE: &str = "epochs.log";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Parameter prefixes tracked by the momentum shadow.
fn shadowed_prefixes(cfg: &TrainConfig) -> Vec<&'static str> {
    let mut p = Vec::new();
    if cfg.projection.momentum_encoder {
        p.extend(["frame_encoder", "event_content_encoder", "event_attribute_encoder"]);
    }
    if cfg.projection.momentum_mlp {
        p.extend(["proj_content", "proj_attribute", "proj_shared"]);
    }
    p
}

/// Everything a run needs to continue: parameters, shadows, optimizer
/// moments and counters. Random streams derive from `seed` and the counters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub nets: Networks,
    pub shadow: Option<Networks>,
    pub gen_opt: RAdam,
    pub dis_opt: RAdam,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

fn dtype_of(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

impl ModelState {
    pub fn fresh(cfg: &TrainConfig, shape: NetShape) -> Result<Self> {
        let nets = Networks::new(&cfg.model, &cfg.projection, shape, cfg.train.seed, dtype_of(cfg.train.precision))?;
        let shadow = if cfg.projection.uses_momentum() {
            Some(Networks::from_store(&cfg.model, &cfg.projection, shape, nets.store().deep_copy()?)?)
        } else {
            None
        };
        Ok(Self {
            nets,
            shadow,
            gen_opt: RAdam::new(cfg.optim.radam()),
            dis_opt: RAdam::new(cfg.optim.radam()),
            step: 0,
            epoch: 0,
            seed: cfg.train.seed,
        })
    }

    pub fn save(&self, cfg: &TrainConfig, stem: &Path) -> Result<PathBuf> {
        let mut tensors = BTreeMap::new();
        tensors.extend(checkpoint::prefixed(self.nets.store().to_tensors(), "net/"));
        if let Some(s) = &self.shadow {
            tensors.extend(checkpoint::prefixed(s.store().to_tensors(), "ema/"));
        }
        tensors.extend(checkpoint::prefixed(self.gen_opt.state_tensors()?, "opt_gen/"));
        tensors.extend(checkpoint::prefixed(self.dis_opt.state_tensors()?, "opt_dis/"));
        let manifest = CheckpointManifest {
            format_version: checkpoint::FORMAT_VERSION,
            step: self.step,
            epoch: self.epoch,
            seed: self.seed,
            config: cfg.to_toml()?,
            tensors_file: String::new(),
            tensors: Vec::new(),
        };
        checkpoint::write(stem, &manifest, &tensors)
    }

    /// Restores a state and the config it was trained with.
    pub fn load(manifest_path: &Path, shape: NetShape) -> Result<(Self, TrainConfig)> {
        let (manifest, tensors) = checkpoint::read(manifest_path)?;
        let cfg = TrainConfig::from_toml_str(&manifest.config)?;
        let mut state = Self::fresh(&cfg, shape)?;
        state.nets.store().assign(&checkpoint::group(&tensors, "net/"))?;
        if let Some(s) = &state.shadow {
            s.store().assign(&checkpoint::group(&tensors, "ema/"))?;
        }
        state.gen_opt = RAdam::load_state(cfg.optim.radam(), &checkpoint::group(&tensors, "opt_gen/"))?;
        state.dis_opt = RAdam::load_state(cfg.optim.radam(), &checkpoint::group(&tensors, "opt_dis/"))?;
        state.step = manifest.step;
        state.epoch = manifest.epoch;
        state.seed = manifest.seed;
        Ok((state, cfg))
    }
}

/// The config stored in a checkpoint manifest, without loading tensors.
pub fn checkpoint_config(manifest_path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    TrainConfig::from_toml_str(&manifest.config)
}

/// One unpaired training batch. `frames2` and `events2` are second views of
/// the same samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub frames: Tensor,
    pub frames2: Tensor,
    pub labels: Vec<usize>,
    pub events: Tensor,
    pub events2: Tensor,
}

fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    report.check_finite(step)
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut ModelState, batch: &Batch, cfg: &TrainConfig) -> Result<LossReport> {
    let w = &cfg.weights;
    let t = &cfg.toggles;
    let on = |term: Term| term.enabled(w, t);
    let lr = cfg.optim.lr_at(state.epoch);
    let nets = &state.nets;

    let zf = nets.encode_frame_content(&batch.frames)?;
    let n_frames = zf.batch();
    let n_events = batch.events.dims()[0];

    let need_content = on(Term::GanCont) || on(Term::DisCont) || on(Term::ContrastEventCont) || on(Term::Uncorrelated);
    let ze = if need_content {
        Some(nets.encode_event_content(&batch.events)?)
    } else {
        None
    };
    let need_fake = [Term::ClsFake, Term::GanEvent, Term::DisEvent, Term::CycCont, Term::CycAtt, Term::Decoder]
        .into_iter()
        .any(on);
    let use_attr = t.attribute_encoder;
    let za = if use_attr && (need_fake || on(Term::Uncorrelated) || on(Term::ContrastAtt)) {
        Some(nets.encode_event_attribute(&batch.events)?)
    } else {
        None
    };

    // fake events: frame content with the attribute of a batch event
    let mut fakes = None;
    if need_fake {
        let za_pair = match &za {
            Some(za) => {
                let idx: Vec<u32> = (0..n_frames).map(|i| (i % n_events) as u32).collect();
                let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
                FeatureMap {
                    tensor: za.tensor.index_select(&idx, 0)?,
                    kind: FeatureKind::EventAttribute,
                }
            }
            None => FeatureMap {
                tensor: zf.tensor.zeros_like()?.detach(),
                kind: FeatureKind::EventAttribute,
            },
        };
        let raw = nets.decode_fake_event(&zf, &za_pair)?;
        let refined = nets.refine(&raw, &batch.frames)?;
        fakes = Some((za_pair, raw, refined));
    }

    // phase A: discriminators on detached inputs
    let mut din = LossInputs::new();
    if on(Term::DisCont) {
        let ze = ze.as_ref().map(FeatureMap::detach);
        let ze = ze.ok_or_else(|| Error::Config("content discriminator needs event content".into()))?;
        let real = nets.discriminate_content(&zf.detach())?;
        let fake = nets.discriminate_content(&ze)?;
        din.insert(Term::DisCont, losses::relativistic_avg_disc_loss(&real, &fake)?);
    }
    if on(Term::DisEvent) {
        let (_, _, refined) = fakes.as_ref().ok_or_else(|| Error::Config("event discriminator needs fakes".into()))?;
        let real = nets.discriminate_event(&batch.events)?;
        let fake = nets.discriminate_event(&refined.detach())?;
        din.insert(Term::DisEvent, losses::relativistic_avg_disc_loss(&real, &fake)?);
    }
    if on(Term::Orth) {
        din.insert(Term::Orth, losses::orthogonal_regularizer(&nets.orth_weights(), w.beta_orth)?);
    }
    let (dis_total, dis_report) = losses::side_objective(Side::Discriminator, &din, w, t)?;
    check_finite(&dis_report, state.step)?;
    if let Some(total) = dis_total {
        let grads = total.backward()?;
        state.dis_opt.step(&state.nets.discriminator_params(), &grads, lr, cfg.optim.grad_clip)?;
    }
    let nets = &state.nets;

    // phase B: generator side against the updated discriminators
    let mut gin = LossInputs::new();
    if on(Term::ClsFrame) {
        gin.insert(Term::ClsFrame, losses::cross_entropy_cls(&nets.classify(&zf)?, &batch.labels)?);
    }
    if on(Term::GanCont) {
        let ze = ze.as_ref().ok_or_else(|| Error::Config("content adversary needs event content".into()))?;
        let real = nets.discriminate_content(&zf)?;
        let fake = nets.discriminate_content(ze)?;
        gin.insert(Term::GanCont, losses::relativistic_avg_gen_loss(&real, &fake)?);
    }
    if let Some((za_pair, raw, refined)) = &fakes {
        if on(Term::GanEvent) {
            let real = nets.discriminate_event(&batch.events)?;
            let fake = nets.discriminate_event(refined)?;
            gin.insert(Term::GanEvent, losses::relativistic_avg_gen_loss(&real, &fake)?);
        }
        if on(Term::ClsFake) || on(Term::CycCont) {
            let zc = nets.encode_event_content(refined)?;
            if on(Term::ClsFake) {
                gin.insert(Term::ClsFake, losses::cross_entropy_cls(&nets.classify(&zc)?, &batch.labels)?);
            }
            if on(Term::CycCont) {
                gin.insert(Term::CycCont, losses::cycle_feature_loss(&zc.tensor, &zf.tensor)?);
            }
        }
        let za_fake = if use_attr && (on(Term::CycAtt) || on(Term::Decoder)) {
            Some(nets.encode_event_attribute(refined)?)
        } else {
            None
        };
        if on(Term::CycAtt) {
            if let Some(zaf) = &za_fake {
                gin.insert(Term::CycAtt, losses::cycle_feature_loss(&zaf.tensor, &za_pair.tensor)?);
            }
        }
        if on(Term::Decoder) {
            let target = losses::pseudo_event_target(&batch.frames, nets.shape().event_channels())?;
            let cyc = match &za_fake {
                Some(zaf) => Some(nets.decode_fake_event(&zf, zaf)?),
                None => None,
            };
            let loss = losses::decoder_output_loss(refined, &target, cyc.as_ref().map(|c| (c, raw)))?;
            gin.insert(Term::Decoder, loss);
        }
    }

    let enc2 = match (&state.shadow, cfg.projection.momentum_encoder) {
        (Some(s), true) => s,
        _ => nets,
    };
    let head2 = match (&state.shadow, cfg.projection.momentum_mlp) {
        (Some(s), true) => s,
        _ => nets,
    };
    let detach2 = cfg.projection.momentum_encoder || cfg.projection.momentum_mlp;
    let second = |z: FeatureMap| -> Result<Tensor> {
        let v = head2.pool_features(&if cfg.projection.momentum_encoder { z.detach() } else { z })?;
        Ok(if detach2 { v.detach() } else { v })
    };
    if on(Term::ContrastFrame) {
        let v1 = nets.pool_features(&zf)?;
        let v2 = second(enc2.encode_frame_content(&batch.frames2)?)?;
        gin.insert(Term::ContrastFrame, losses::contrastive_term(&v1, &v2)?);
    }
    if on(Term::ContrastEventCont) {
        if let Some(ze) = &ze {
            let v1 = nets.pool_features(ze)?;
            let v2 = second(enc2.encode_event_content(&batch.events2)?)?;
            gin.insert(Term::ContrastEventCont, losses::contrastive_term(&v1, &v2)?);
        }
    }
    if on(Term::ContrastAtt) {
        if let Some(za) = &za {
            let v1 = nets.pool_features(za)?;
            let v2 = second(enc2.encode_event_attribute(&batch.events2)?)?;
            gin.insert(Term::ContrastAtt, losses::contrastive_term(&v1, &v2)?);
        }
    }
    if on(Term::Uncorrelated) {
        if let (Some(za), Some(ze)) = (&za, &ze) {
            let va = nets.pool_features(za)?;
            let vc = nets.pool_features(ze)?;
            gin.insert(Term::Uncorrelated, losses::uncorrelated_term(&va, &vc)?);
        }
    }
    let (gen_total, gen_report) = losses::side_objective(Side::Generator, &gin, w, t)?;
    check_finite(&gen_report, state.step)?;
    if let Some(total) = gen_total {
        let grads = total.backward()?;
        state.gen_opt.step(&state.nets.generator_params(), &grads, lr, cfg.optim.grad_clip)?;
    }

    if let (Some(shadow), Some(decay)) = (&state.shadow, cfg.projection.ema_decay) {
        let prefixes = shadowed_prefixes(cfg);
        ema_update(&shadow.store().subset(&prefixes), state.nets.store(), decay)?;
    }

    state.step += 1;
    let mut report = gen_report;
    report.merge(dis_report);
    Ok(report)
}

fn permutation(n: usize, seed: u64, path: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng::rng_for(seed, path));
    v
}

/// Drives [`train_step`] over a dataset: shuffling, batching, augmentation
/// and epoch bookkeeping.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    pub state: ModelState,
    steps_per_epoch: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        let shape = Self::check(cfg, data)?;
        let state = ModelState::fresh(cfg, shape)?;
        Self::with_state(cfg, data, state)
    }

    /// Continues from a checkpoint written by [`ModelState::save`].
    pub fn resume(cfg: &TrainConfig, data: &'a Dataset, manifest: &Path) -> Result<Self> {
        let shape = Self::check(cfg, data)?;
        let (state, _) = ModelState::load(manifest, shape)?;
        Self::with_state(cfg, data, state)
    }

    fn with_state(cfg: &TrainConfig, data: &'a Dataset, state: ModelState) -> Result<Self> {
        let frames = data.frames(Split::Train).len() as u64;
        let fb = cfg.train.frame_batch as u64;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            state,
            steps_per_epoch: frames.div_ceil(fb),
        })
    }

    fn check(cfg: &TrainConfig, data: &Dataset) -> Result<NetShape> {
        cfg.validate()?;
        if data.frames(Split::Train).is_empty() {
            return Err(Error::Config("no labeled training frames".into()));
        }
        if data.train_events().is_empty() {
            return Err(Error::Config("no training events".into()));
        }
        Ok(NetShape {
            height: cfg.data.height,
            width: cfg.data.width,
            bins: cfg.data.bins,
            classes: data.num_classes(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.cfg.train.epochs
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// The batch consumed by global step `step`.
    pub fn batch_for(&self, step: u64) -> Result<Batch> {
        let seed = self.state.seed;
        let epoch = step / self.steps_per_epoch;
        let k = (step % self.steps_per_epoch) as usize;
        let frames = self.data.frames(Split::Train);
        let events = self.data.train_events();
        let fb = self.cfg.train.frame_batch;
        let eb = self.cfg.train.event_batch;
        let forder = permutation(frames.len(), seed, &[tag::SHUFFLE_FRAMES, epoch]);
        let eorder = permutation(events.len(), seed, &[tag::SHUFFLE_EVENTS, epoch]);
        let dtype = dtype_of(self.cfg.train.precision);

        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        let mut labels = Vec::new();
        for &i in &forder[k * fb..((k + 1) * fb).min(frames.len())] {
            let s = rng::derive(seed, &[tag::AUGMENT_FRAMES, step, i as u64]);
            let (a, b) = two_view(&Sample::Frame(frames.get(i)?), &self.cfg.augment.frames, s)?;
            let (Sample::Frame(a), Sample::Frame(b)) = (a, b) else {
                unreachable!("frame views stay frames")
            };
            labels.push(frames.label(i));
            f1.push(a.grid().clone());
            f2.push(b.grid().clone());
        }
        let mut e1 = Vec::new();
        let mut e2 = Vec::new();
        for j in 0..eb {
            let i = eorder[(k * eb + j) % events.len()];
            let s = rng::derive(seed, &[tag::AUGMENT_EVENTS, step, i as u64]);
            let (a, b) = two_view(&Sample::Event(events.get(i)?), &self.cfg.augment.events, s)?;
            let (Sample::Event(a), Sample::Event(b)) = (a, b) else {
                unreachable!("event views stay events")
            };
            e1.push(a.into_grid());
            e2.push(b.into_grid());
        }
        let stack = |g: &[Grid]| -> Result<Tensor> {
            let refs: Vec<&Grid> = g.iter().collect();
            grid::stack(&refs, dtype, &Device::Cpu)
        };
        Ok(Batch {
            frames: stack(&f1)?,
            frames2: stack(&f2)?,
            labels,
            events: stack(&e1)?,
            events2: stack(&e2)?,
        })
    }

    /// Runs the next step and advances the epoch counter at boundaries.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.batch_for(self.state.step)?;
        let report = train_step(&mut self.state, &batch, &self.cfg)?;
        self.state.epoch = self.state.step / self.steps_per_epoch;
        Ok(report)
    }

    pub fn at_epoch_boundary(&self) -> bool {
        self.state.step % self.steps_per_epoch == 0
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: Option<PathBuf>,
    pub steps: u64,
    /// Validation accuracy after each epoch run in this call.
    pub val_history: Vec<f64>,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<u64>,
    pub test_acc: Option<f64>,
    /// Parameter hashes before the first step of this call and after the last.
    pub initial_fingerprint: String,
    pub param_fingerprint: String,
}

pub fn checkpoint_stem(out: &Path, epoch: u64) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Trains for `cfg.train.epochs`, optionally continuing from a checkpoint.
/// Appends one metrics line per step, writes a checkpoint per epoch and
/// reports validation and test accuracy on held-out events.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = load_dataset(&cfg.data)?;
    train_on(cfg, &data, resume)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, resume: Option<&Path>) -> Result<TrainSummary> {
    let out = &cfg.output.dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, data, p)?,
        None => Trainer::new(cfg, data)?,
    };
    let mut metrics = OpenOptions::new().create(true).append(true).open(out.join(METRICS_FILE))?;
    let mut epochs = OpenOptions::new().create(true).append(true).open(out.join(EPOCHS_FILE))?;
    let mut summary = TrainSummary {
        checkpoint: resume.map(Path::to_path_buf),
        steps: 0,
        val_history: Vec::new(),
        best_val_acc: None,
        best_epoch: None,
        test_acc: None,
        initial_fingerprint: trainer.state.nets.store().fingerprint()?,
        param_fingerprint: String::new(),
    };
    while !trainer.finished() {
        let report = trainer.step()?;
        let step = trainer.state.step - 1;
        writeln!(metrics, "{}", report.to_line(step))?;
        summary.steps += 1;
        if trainer.at_epoch_boundary() {
            let epoch = trainer.state.epoch;
            let mut line = format!("epoch={epoch} step={} lr={:.6e}", trainer.state.step, cfg.optim.lr_at(epoch - 1));
            if cfg.train.validate && !data.val_events().is_empty() {
                let acc = eval::evaluate_accuracy(&trainer.state.nets, data.val_events())?.accuracy;
                line.push_str(&format!(" val_acc={acc:.6}"));
                summary.val_history.push(acc);
                if summary.best_val_acc.is_none_or(|b| acc > b) {
                    summary.best_val_acc = Some(acc);
                    summary.best_epoch = Some(epoch);
                }
            }
            writeln!(epochs, "{line}")?;
            log::info!("{line}");
            if cfg.output.checkpoints {
                summary.checkpoint = Some(trainer.state.save(cfg, &checkpoint_stem(out, epoch))?);
            }
        }
    }
    if !data.test_events().is_empty() {
        let acc = eval::evaluate_accuracy(&trainer.state.nets, data.test_events())?.accuracy;
        writeln!(epochs, "final test_acc={acc:.6}")?;
        summary.test_acc = Some(acc);
    }
    summary.param_fingerprint = trainer.state.nets.store().fingerprint()?;
    Ok(summary)
}
