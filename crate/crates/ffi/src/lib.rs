//! C interface to `evadapt`.
//!
//! Every fallible function returns an [`EvadaptStatus`]; on failure the
//! message is kept per thread and read with [`evadapt_last_error`]. Objects
//! cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function. Panics are caught and reported as
//! [`EvadaptStatus::Panic`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use candle_core::{DType, Device, Tensor};
use evadapt::event_core::{self, EventFormat, EventStream, Polarity};
use evadapt::grid::Grid;
use evadapt::losses;
use evadapt::nets::NetShape;
use evadapt::trainer::{self, checkpoint, ModelState, TrainConfig};
use evadapt::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvadaptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    Argument = 5,
    Contract = 6,
    Config = 7,
    Ingestion = 8,
    Export = 9,
    NumericGuard = 10,
    NonFinite = 11,
    Checkpoint = 12,
    Io = 13,
    Tensor = 14,
    BufferTooSmall = 15,
    Panic = 16,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvadaptEventFormat {
    Canonical = 0,
    NcaltechBin = 1,
    Aedat = 2,
}

/// One event as seen from C. `polarity` is +1 or -1.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EvadaptEvent {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: i8,
}

/// Outcome of [`evadapt_train`]. Accuracies are NaN when unavailable.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EvadaptTrainSummary {
    pub steps: u64,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

/// Opaque parsed event stream.
pub struct EvadaptEventStream(EventStream);

/// Opaque trained model, restored from a checkpoint.
pub struct EvadaptModel {
    state: ModelState,
    cfg: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EvadaptStatus {
    match e {
        Error::Parse { .. } => EvadaptStatus::Parse,
        Error::Validation(_) => EvadaptStatus::Validation,
        Error::Argument(_) => EvadaptStatus::Argument,
        Error::Contract(_) => EvadaptStatus::Contract,
        Error::Config(_) => EvadaptStatus::Config,
        Error::Ingestion { .. } => EvadaptStatus::Ingestion,
        Error::Export(_) => EvadaptStatus::Export,
        Error::NumericGuard(_) => EvadaptStatus::NumericGuard,
        Error::NonFinite { .. } => EvadaptStatus::NonFinite,
        Error::Checkpoint(_) => EvadaptStatus::Checkpoint,
        Error::Io(_) => EvadaptStatus::Io,
        Error::Tensor(_) => EvadaptStatus::Tensor,
    }
}

struct Fail(EvadaptStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<candle_core::Error> for Fail {
    fn from(e: candle_core::Error) -> Self {
        Fail(EvadaptStatus::Tensor, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EvadaptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvadaptStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("panic inside evadapt");
            EvadaptStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EvadaptStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(EvadaptStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evadapt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 when none is set.
#[no_mangle]
pub unsafe extern "C" fn evadapt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses an event file held in memory.
#[no_mangle]
pub unsafe extern "C" fn evadapt_event_stream_parse(
    bytes: *const u8,
    len: usize,
    format: EvadaptEventFormat,
    out: *mut *mut EvadaptEventStream,
) -> EvadaptStatus {
    guard(|| {
        let data = slice(bytes, len, "bytes")?;
        let format = match format {
            EvadaptEventFormat::Canonical => EventFormat::Canonical,
            EvadaptEventFormat::NcaltechBin => EventFormat::NcaltechBin,
            EvadaptEventFormat::Aedat => EventFormat::Aedat,
        };
        let s = event_core::parse_event_stream(data, format)?;
        write_out(out, Box::into_raw(Box::new(EvadaptEventStream(s))), "out")
    })
}

/// Builds a stream from `n` events on a `width` x `height` sensor.
#[no_mangle]
pub unsafe extern "C" fn evadapt_event_stream_new(
    events: *const EvadaptEvent,
    n: usize,
    width: u32,
    height: u32,
    out: *mut *mut EvadaptEventStream,
) -> EvadaptStatus {
    guard(|| {
        let evs = slice(events, n, "events")?
            .iter()
            .map(|e| {
                let p = Polarity::from_sign(e.polarity)
                    .ok_or_else(|| Fail(EvadaptStatus::Argument, format!("polarity {} is not +1 or -1", e.polarity)))?;
                Ok(event_core::Event::new(e.t, e.x, e.y, p))
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let s = EventStream::new(evs, width, height)?;
        write_out(out, Box::into_raw(Box::new(EvadaptEventStream(s))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn evadapt_event_stream_free(s: *mut EvadaptEventStream) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of events, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn evadapt_event_stream_len(s: *const EvadaptEventStream) -> usize {
    s.as_ref().map_or(0, |s| s.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn evadapt_event_stream_get(
    s: *const EvadaptEventStream,
    index: usize,
    out: *mut EvadaptEvent,
) -> EvadaptStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("stream"))?;
        let e = s
            .0
            .events()
            .get(index)
            .ok_or_else(|| Fail(EvadaptStatus::Argument, format!("index {index} out of range ({})", s.0.len())))?;
        write_out(
            out,
            EvadaptEvent {
                t: e.t,
                x: e.x,
                y: e.y,
                polarity: e.polarity.sign(),
            },
            "out",
        )
    })
}

/// Voxelizes raw event counts into `out` laid out `(2*bins, height, width)`: positive bins
/// first. `out_len` must be at least `2*bins*height*width`.
#[no_mangle]
pub unsafe extern "C" fn evadapt_event_stream_voxelize(
    s: *const EvadaptEventStream,
    height: usize,
    width: usize,
    bins: usize,
    out: *mut f32,
    out_len: usize,
) -> EvadaptStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("stream"))?;
        let t = event_core::voxelize(&s.0, height, width, bins)?;
        let data = t.grid().data();
        if out_len < data.len() {
            return Err(Fail(
                EvadaptStatus::BufferTooSmall,
                format!("need {} floats, got {out_len}", data.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

fn vec_tensor(v: &[f64]) -> Result<Tensor, Fail> {
    Ok(Tensor::from_slice(v, v.len(), &Device::Cpu)?)
}

fn mat_tensor(v: &[f64], rows: usize, cols: usize) -> Result<Tensor, Fail> {
    Ok(Tensor::from_slice(v, (rows, cols), &Device::Cpu)?)
}

fn scalar(t: Tensor) -> Result<f64, Fail> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Relativistic average discriminator loss over score vectors.
#[no_mangle]
pub unsafe extern "C" fn evadapt_relativistic_disc_loss(
    real: *const f64,
    n_real: usize,
    fake: *const f64,
    n_fake: usize,
    out: *mut f64,
) -> EvadaptStatus {
    guard(|| {
        let r = vec_tensor(slice(real, n_real, "real")?)?;
        let f = vec_tensor(slice(fake, n_fake, "fake")?)?;
        write_out(out, scalar(losses::relativistic_avg_disc_loss(&r, &f)?)?, "out")
    })
}

/// Relativistic average generator loss over score vectors.
#[no_mangle]
pub unsafe extern "C" fn evadapt_relativistic_gen_loss(
    real: *const f64,
    n_real: usize,
    fake: *const f64,
    n_fake: usize,
    out: *mut f64,
) -> EvadaptStatus {
    guard(|| {
        let r = vec_tensor(slice(real, n_real, "real")?)?;
        let f = vec_tensor(slice(fake, n_fake, "fake")?)?;
        write_out(out, scalar(losses::relativistic_avg_gen_loss(&r, &f)?)?, "out")
    })
}

/// Mean negative cosine similarity between matching rows of two `rows x dim`
/// row-major matrices.
#[no_mangle]
pub unsafe extern "C" fn evadapt_contrastive_loss(
    a: *const f64,
    b: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
) -> EvadaptStatus {
    guard(|| {
        let x = mat_tensor(slice(a, rows * dim, "a")?, rows, dim)?;
        let y = mat_tensor(slice(b, rows * dim, "b")?, rows, dim)?;
        write_out(out, scalar(losses::contrastive_alignment_loss(&x, &y)?)?, "out")
    })
}

/// Mean absolute cosine similarity between matching rows.
#[no_mangle]
pub unsafe extern "C" fn evadapt_uncorrelated_loss(
    a: *const f64,
    b: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
) -> EvadaptStatus {
    guard(|| {
        let x = mat_tensor(slice(a, rows * dim, "a")?, rows, dim)?;
        let y = mat_tensor(slice(b, rows * dim, "b")?, rows, dim)?;
        write_out(out, scalar(losses::uncorrelated_conditioning_loss(&x, &y)?)?, "out")
    })
}

/// Trains with the config file at `config_path`; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn evadapt_train(config_path: *const c_char, summary: *mut EvadaptTrainSummary) -> EvadaptStatus {
    guard(|| {
        let cfg = TrainConfig::load(&path_arg(config_path, "config_path")?)?;
        let s = trainer::train(&cfg, None)?;
        if !summary.is_null() {
            summary.write(EvadaptTrainSummary {
                steps: s.steps,
                best_val_acc: s.best_val_acc.unwrap_or(f64::NAN),
                test_acc: s.test_acc.unwrap_or(f64::NAN),
            });
        }
        Ok(())
    })
}

fn load_model(path: &Path) -> Result<EvadaptModel, Fail> {
    let cfg = trainer::checkpoint_config(path)?;
    let (_, tensors) = checkpoint::read(path)?;
    let bias = tensors
        .get("net/classifier.fc.bias")
        .ok_or_else(|| Fail(EvadaptStatus::Checkpoint, "checkpoint lacks the classifier".into()))?;
    let shape = NetShape {
        height: cfg.data.height,
        width: cfg.data.width,
        bins: cfg.data.bins,
        classes: bias.dims()[0],
    };
    let (state, _) = ModelState::load(path, shape)?;
    Ok(EvadaptModel { state, cfg })
}

/// Restores a model from a checkpoint manifest (`.json`).
#[no_mangle]
pub unsafe extern "C" fn evadapt_model_load(path: *const c_char, out: *mut *mut EvadaptModel) -> EvadaptStatus {
    guard(|| {
        let m = load_model(&path_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(m)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn evadapt_model_free(m: *mut EvadaptModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Writes the class count and the expected event tensor geometry.
#[no_mangle]
pub unsafe extern "C" fn evadapt_model_shape(
    m: *const EvadaptModel,
    classes: *mut usize,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> EvadaptStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let s = m.state.nets.shape();
        write_out(classes, s.classes, "classes")?;
        write_out(channels, s.event_channels(), "channels")?;
        write_out(height, s.height, "height")?;
        write_out(width, s.width, "width")
    })
}

/// Classifies `n` event tensors stored back to back, each laid out as in
/// [`evadapt_event_stream_voxelize`] and already normalized the way the model
/// was trained, writing one class index per sample.
#[no_mangle]
pub unsafe extern "C" fn evadapt_model_classify_events(
    m: *const EvadaptModel,
    data: *const f32,
    n: usize,
    labels: *mut u32,
) -> EvadaptStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let s = m.state.nets.shape();
        let (c, h, w) = (s.event_channels(), s.height, s.width);
        let per = c * h * w;
        let values = slice(data, n * per, "data")?;
        let grids = values
            .chunks_exact(per.max(1))
            .map(|v| Grid::from_vec(c, h, w, v.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = evadapt::eval::predict_events(&m.state.nets, &grids)?;
        if n > 0 && labels.is_null() {
            return Err(null("labels"));
        }
        for (i, p) in pred.into_iter().enumerate() {
            *labels.add(i) = p as u32;
        }
        Ok(())
    })
}

/// Voxelizes and normalizes `stream` with the model's data settings, then
/// classifies it.
#[no_mangle]
pub unsafe extern "C" fn evadapt_model_classify_stream(
    m: *const EvadaptModel,
    stream: *const EvadaptEventStream,
    label: *mut u32,
) -> EvadaptStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let s = stream.as_ref().ok_or_else(|| null("stream"))?;
        let d = &m.cfg.data;
        let t = event_core::voxelize(&s.0, d.height, d.width, d.bins)?.normalized(d.event_norm);
        let pred = evadapt::eval::predict_events(&m.state.nets, &[t.into_grid()])?;
        write_out(label, pred[0] as u32, "label")
    })
}
