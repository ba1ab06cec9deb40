//! Target-domain accuracy, exports and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use rand::Rng as _;

use crate::datasets::{load_dataset, Dataset, FrameSet, LabeledEvents, UnlabeledEvents};
use crate::error::{Error, Result};
use crate::grid::{self, Grid};
use crate::nets::{FeatureKind, FeatureMap, Networks};
use crate::rng::{self, tag};
use crate::trainer::{self, TrainConfig};

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub samples: usize,
}

/// Scores predictions against labels over `classes` classes.
pub fn accuracy_from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Accuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("cannot score an empty set".into()));
    }
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= classes {
            return Err(Error::Argument(format!("label {l} outside {classes} classes")));
        }
        seen[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let total: usize = hit.iter().sum();
    Ok(Accuracy {
        accuracy: total as f64 / labels.len() as f64,
        per_class: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        samples: labels.len(),
    })
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|i| i as usize).collect())
}

fn stack_grids(grids: &[Grid], nets: &Networks) -> Result<Tensor> {
    let refs: Vec<&Grid> = grids.iter().collect();
    grid::stack(&refs, nets.dtype(), &Device::Cpu)
}

/// Class predictions through the event content encoder and the classifier.
pub fn predict_events(nets: &Networks, grids: &[Grid]) -> Result<Vec<usize>> {
    nets.evaluating(|| {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(EVAL_BATCH) {
            let x = stack_grids(chunk, nets)?;
            let z = nets.encode_event_content(&x)?;
            out.extend(argmax_rows(&nets.classify(&z)?)?);
        }
        Ok(out)
    })
}

/// Accuracy of the test-time path on labeled events, without augmentation.
pub fn evaluate_accuracy(nets: &Networks, events: &LabeledEvents) -> Result<Accuracy> {
    if events.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let mut predictions = Vec::with_capacity(events.len());
    let mut labels = Vec::with_capacity(events.len());
    for start in (0..events.len()).step_by(EVAL_BATCH) {
        let mut grids = Vec::new();
        for i in start..(start + EVAL_BATCH).min(events.len()) {
            let (t, l) = events.get(i)?;
            grids.push(t.into_grid());
            labels.push(l);
        }
        predictions.extend(predict_events(nets, &grids)?);
    }
    accuracy_from_predictions(&predictions, &labels, nets.classes())
}

fn export_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Export(format!("{}: {e}", path.display()))
}

/// Writes pooled pre-logit vectors as TSV: `domain label v0 v1 ...`, one row
/// per frame and per event, after a header row.
pub fn export_embeddings(nets: &Networks, frames: &FrameSet, events: &LabeledEvents, path: &Path) -> Result<usize> {
    nets.evaluating(|| write_embeddings(nets, frames, events, path))
}

fn write_embeddings(nets: &Networks, frames: &FrameSet, events: &LabeledEvents, path: &Path) -> Result<usize> {
    let dim = 4 * nets.config().width * 2;
    let mut text = String::from("domain\tlabel");
    for d in 0..dim {
        let _ = write!(text, "\tv{d}");
    }
    text.push('\n');
    let mut rows = 0;
    let mut emit = |domain: &str, labels: &[usize], grids: Vec<Grid>, frames: bool| -> Result<()> {
        let x = stack_grids(&grids, nets)?;
        let z = if frames {
            nets.encode_frame_content(&x)?
        } else {
            nets.encode_event_content(&x)?
        };
        let v = nets.embed(&z)?.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
        for (l, row) in labels.iter().zip(v) {
            let _ = write!(text, "{domain}\t{l}");
            for x in row {
                let _ = write!(text, "\t{x}");
            }
            text.push('\n');
            rows += 1;
        }
        Ok(())
    };
    for start in (0..frames.len()).step_by(EVAL_BATCH) {
        let idx = start..(start + EVAL_BATCH).min(frames.len());
        let labels: Vec<usize> = idx.clone().map(|i| frames.label(i)).collect();
        let grids = idx.map(|i| frames.get(i).map(|f| f.grid().clone())).collect::<Result<_>>()?;
        emit("frame", &labels, grids, true)?;
    }
    for start in (0..events.len()).step_by(EVAL_BATCH) {
        let idx = start..(start + EVAL_BATCH).min(events.len());
        let labels: Vec<usize> = idx.clone().map(|i| events.label(i)).collect();
        let grids = idx.map(|i| events.get(i).map(|(e, _)| e.into_grid())).collect::<Result<_>>()?;
        emit("event", &labels, grids, false)?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(export_err(dir))?;
    }
    fs::write(path, text).map_err(export_err(path))?;
    Ok(rows)
}

/// Positive bins minus negative bins, min-max scaled to 0..=255.
pub fn render_event_image(g: &Grid) -> Vec<u8> {
    let bins = g.channels() / 2;
    let n = g.height() * g.width();
    let mut acc = vec![0f32; n];
    for c in 0..g.channels() {
        let s = if c < bins { 1.0 } else { -1.0 };
        for (a, v) in acc.iter_mut().zip(g.plane(c)) {
            *a += s * v;
        }
    }
    let lo = acc.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = acc.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    acc.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Attribute source index for each frame.
pub fn fake_pairing(frames: usize, events: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng_for(seed, &[tag::FAKE_PAIRING]);
    (0..frames).map(|_| r.gen_range(0..events)).collect()
}

/// For each frame, synthesizes an event from its content and the attribute of
/// a randomly drawn event, and writes `fake_<i>.png`: the frame on the left,
/// the rendered fake on the right. With `attribute` off the decoder receives
/// zeros, as during training without the attribute encoder.
pub fn export_fake_events(
    nets: &Networks,
    frames: &FrameSet,
    events: &UnlabeledEvents,
    dir: &Path,
    seed: u64,
    attribute: bool,
) -> Result<Vec<PathBuf>> {
    if events.is_empty() {
        return Err(Error::Argument("no events to draw attributes from".into()));
    }
    nets.evaluating(|| write_fake_events(nets, frames, events, dir, seed, attribute))
}

fn write_fake_events(
    nets: &Networks,
    frames: &FrameSet,
    events: &UnlabeledEvents,
    dir: &Path,
    seed: u64,
    attribute: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(export_err(dir))?;
    let pairing = fake_pairing(frames.len(), events.len(), seed);
    let (h, w) = (nets.shape().height, nets.shape().width);
    let mut paths = Vec::new();
    for (i, &j) in pairing.iter().enumerate() {
        let frame = frames.get(i)?.grid().clone();
        let x = stack_grids(std::slice::from_ref(&frame), nets)?;
        let zf = nets.encode_frame_content(&x)?;
        let za = if attribute {
            let e = stack_grids(&[events.get(j)?.into_grid()], nets)?;
            nets.encode_event_attribute(&e)?
        } else {
            FeatureMap {
                tensor: zf.tensor.zeros_like()?,
                kind: FeatureKind::EventAttribute,
            }
        };
        let fake = nets.refine(&nets.decode_fake_event(&zf, &za)?, &x)?;
        let g = Grid::from_tensor(&fake.squeeze(0)?)?;
        let ev = render_event_image(&g);
        let mut img = RgbImage::new(2 * w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |c| (frame.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
                let v = ev[y * w + x];
                img.put_pixel((w + x) as u32, y as u32, Rgb([v, v, v]));
            }
        }
        let p = dir.join(format!("fake_{i:04}.png"));
        img.save(&p).map_err(|e| Error::Export(format!("{}: {e}", p.display())))?;
        paths.push(p);
    }
    Ok(paths)
}

/// One row of the ablation matrix: a name and the toggles it changes.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub toggles: Vec<(String, bool)>,
}

impl AblationCell {
    pub fn new(name: &str, toggles: &[(&str, bool)]) -> Self {
        Self {
            name: name.into(),
            toggles: toggles.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        for (k, v) in &self.toggles {
            c.toggles.set(k, *v)?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// The loss ablation: without attribute encoder, neither cosine loss,
    /// each one alone, and both.
    pub fn loss_ablation(seeds: &[u64]) -> Self {
        Self {
            cells: vec![
                AblationCell::new("no_attribute_encoder", &[("attribute_encoder", false)]),
                AblationCell::new("baseline", &[("contrastive", false), ("uncorrelated", false)]),
                AblationCell::new("contrastive", &[("contrastive", true), ("uncorrelated", false)]),
                AblationCell::new("uncorrelated", &[("contrastive", false), ("uncorrelated", true)]),
                AblationCell::new("both", &[("contrastive", true), ("uncorrelated", true)]),
            ],
            seeds: seeds.to_vec(),
        }
    }

    /// Parses `name:toggle=on,toggle=off;name2:...`.
    pub fn parse_cells(spec: &str) -> Result<Vec<AblationCell>> {
        let mut cells = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, rest) = part.split_once(':').unwrap_or((part, ""));
            let mut toggles = Vec::new();
            for kv in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                toggles.push(parse_toggle(kv)?);
            }
            cells.push(AblationCell {
                name: name.trim().to_string(),
                toggles,
            });
        }
        Ok(cells)
    }
}

/// `name=on` / `name=off`.
pub fn parse_toggle(kv: &str) -> Result<(String, bool)> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("toggle `{kv}` must look like name=on|off")))?;
    let on = match v.trim() {
        "on" | "true" | "1" => true,
        "off" | "false" | "0" => false,
        other => return Err(Error::Config(format!("toggle value `{other}` must be on or off"))),
    };
    Ok((k.trim().to_string(), on))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    /// Best validation accuracy over epochs.
    pub val_acc: Option<f64>,
    /// Test accuracy after the final epoch.
    pub test_acc: Option<f64>,
    pub fingerprint: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation; `None` for an empty input.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), |v| format!("{v:.6}"))
}

impl AblationTable {
    pub fn cells(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.cell.as_str()) {
                names.push(&r.cell);
            }
        }
        names
    }

    pub fn values(&self, cell: &str, test: bool) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| if test { r.test_acc } else { r.val_acc })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("cell\tseed\tval_acc\ttest_acc\terror\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.cell,
                r.seed,
                fmt_opt(r.val_acc),
                fmt_opt(r.test_acc),
                r.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " ")
            );
        }
        s
    }

    /// Per-cell mean and standard deviation of both accuracies.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("cell\truns\tval_mean\tval_std\ttest_mean\ttest_std\n");
        for cell in self.cells() {
            let v = mean_std(&self.values(cell, false));
            let t = mean_std(&self.values(cell, true));
            let runs = self.rows.iter().filter(|r| r.cell == cell && r.error.is_none()).count();
            let _ = writeln!(
                s,
                "{cell}\t{runs}\t{}\t{}\t{}\t{}",
                fmt_opt(v.map(|x| x.0)),
                fmt_opt(v.map(|x| x.1)),
                fmt_opt(t.map(|x| x.0)),
                fmt_opt(t.map(|x| x.1))
            );
        }
        s
    }
}

/// Trains every cell for every seed from fresh parameters. Outputs go to
/// `<out>/<cell>/seed_<n>`; a failing cell is recorded and the rest proceed.
pub fn run_ablation(base: &TrainConfig, matrix: &AblationMatrix, out: &Path) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    if matrix.cells.is_empty() || matrix.seeds.is_empty() {
        return Ok(table);
    }
    let data = load_dataset(&base.data)?;
    for cell in &matrix.cells {
        for &seed in &matrix.seeds {
            let row = run_cell(base, &data, cell, seed, out);
            log::info!("ablation {} seed {}: {:?}", cell.name, seed, row.val_acc);
            table.rows.push(row);
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.tsv"), table.to_tsv())?;
    fs::write(out.join("ablation_summary.tsv"), table.summary_tsv())?;
    Ok(table)
}

fn run_cell(base: &TrainConfig, data: &Dataset, cell: &AblationCell, seed: u64, out: &Path) -> AblationRow {
    let mut row = AblationRow {
        cell: cell.name.clone(),
        seed,
        val_acc: None,
        test_acc: None,
        fingerprint: None,
        error: None,
    };
    let result = cell.apply(base).and_then(|mut cfg| {
        cfg.train.seed = seed;
        cfg.output.dir = out.join(&cell.name).join(format!("seed_{seed}"));
        trainer::train_on(&cfg, data, None)
    });
    match result {
        Ok(s) => {
            row.val_acc = s.best_val_acc;
            row.test_acc = s.test_acc;
            row.fingerprint = Some(s.initial_fingerprint);
        }
        Err(e) => row.error = Some(format!("{}: {e}", e.kind())),
    }
    row
}
