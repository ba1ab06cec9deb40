//! Benchmark ingestion and the synthetic toy benchmark.
//!
//! Every dataset kind uses one directory layout:
//! `root/frames/<class>/<id>.{png,jpg,jpeg,bmp}` and
//! `root/events/<class>/<id>.{evt,bin,aedat}`, optionally with a
//! `manifest.tsv` fixing splits and checksums.

pub mod manifest;
pub mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use manifest::{ManifestRow, MANIFEST_FILE};
pub use toy::{generate_toy_dataset, ToyConfig};

use crate::error::{Error, Result};
use crate::event_core::{parse_event_stream, voxelize, EventFormat, EventNorm, EventTensor};
use crate::frame_core::{load_frame, FrameTensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Caltech101Pair,
    Cifar10Pair,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Frames,
    Events,
}

impl Domain {
    pub fn dir(self) -> &'static str {
        match self {
            Domain::Frames => "frames",
            Domain::Events => "events",
        }
    }

    pub fn from_dir(s: &str) -> Option<Self> {
        match s {
            "frames" => Some(Domain::Frames),
            "events" => Some(Domain::Events),
            _ => None,
        }
    }

    fn accepts(self, ext: &str) -> bool {
        match self {
            Domain::Frames => matches!(ext, "png" | "jpg" | "jpeg" | "bmp"),
            Domain::Events => EventFormat::from_extension(ext).is_some(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Where a benchmark lives and how its samples become tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    /// Train/val/test fractions used when no manifest exists. Defaults
    /// depend on `kind`.
    pub fractions: Option<[f64; 3]>,
    pub split_seed: u64,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Expected class count; checked against the discovered classes.
    pub classes: Option<usize>,
    pub event_norm: EventNorm,
    /// Keep decoded samples in memory after first use.
    pub cache: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Toy,
            root: PathBuf::from("data/toy"),
            fractions: None,
            split_seed: 0,
            height: 32,
            width: 32,
            bins: 2,
            classes: None,
            event_norm: EventNorm::UnitMax,
            cache: true,
        }
    }
}

impl DatasetSpec {
    pub fn resolved_fractions(&self) -> [f64; 3] {
        self.fractions.unwrap_or(match self.kind {
            DatasetKind::Caltech101Pair => [0.45, 0.30, 0.25],
            DatasetKind::Cifar10Pair => [5.0 / 6.0, 0.0, 1.0 / 6.0],
            DatasetKind::Toy => [0.8, 0.1, 0.1],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.resolved_fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
        }
        if self.height == 0 || self.width == 0 || self.bins == 0 {
            return Err(Error::Config("data.height, data.width and data.bins must be positive".into()));
        }
        Ok(())
    }

    /// Split of `key` when no manifest fixes it.
    pub fn split_of(&self, key: &str) -> Split {
        let u = rng::unit_interval(rng::derive(self.split_seed, &[rng::tag::SPLIT, rng::hash_str(key)]));
        let [train, val, _] = self.resolved_fractions();
        if u < train {
            Split::Train
        } else if u < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// `<class>/<id>`, unique within a domain.
    pub key: String,
    pub class: usize,
    pub path: PathBuf,
}

#[derive(Debug)]
struct Store<T> {
    records: Vec<Record>,
    cache: Option<Vec<OnceLock<T>>>,
}

impl<T: Clone> Store<T> {
    fn new(records: Vec<Record>, cache: bool) -> Self {
        let cache = cache.then(|| (0..records.len()).map(|_| OnceLock::new()).collect());
        Self { records, cache }
    }

    fn load(&self, i: usize, f: impl FnOnce(&Record) -> Result<T>) -> Result<T> {
        let rec = self
            .records
            .get(i)
            .ok_or_else(|| Error::Argument(format!("sample index {i} out of range ({})", self.records.len())))?;
        match &self.cache {
            None => f(rec),
            Some(c) => {
                if let Some(v) = c[i].get() {
                    return Ok(v.clone());
                }
                let v = f(rec)?;
                Ok(c[i].get_or_init(|| v).clone())
            }
        }
    }
}

/// Labeled frames of one split.
#[derive(Debug)]
pub struct FrameSet {
    store: Store<FrameTensor>,
    resolution: (usize, usize),
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.store.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.records.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<FrameTensor> {
        self.store.load(i, |r| load_frame(&r.path, self.resolution, r.class))
    }

    pub fn label(&self, i: usize) -> usize {
        self.store.records[i].class
    }

    pub fn records(&self) -> &[Record] {
        &self.store.records
    }
}

#[derive(Debug)]
struct EventLoader {
    store: Store<EventTensor>,
    height: usize,
    width: usize,
    bins: usize,
    norm: EventNorm,
}

impl EventLoader {
    fn get(&self, i: usize) -> Result<EventTensor> {
        self.store.load(i, |r| load_event_tensor(&r.path, self.height, self.width, self.bins, self.norm))
    }
}

/// Reads, voxelizes and normalizes one event file.
pub fn load_event_tensor(path: &Path, height: usize, width: usize, bins: usize, norm: EventNorm) -> Result<EventTensor> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let format = EventFormat::from_extension(ext)
        .ok_or_else(|| Error::ingestion(path, format!("unknown event extension `{ext}`")))?;
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e))?;
    let stream = parse_event_stream(&bytes, format).map_err(|e| Error::ingestion(path, e))?;
    Ok(voxelize(&stream, height, width, bins)?.normalized(norm))
}

/// Training-time event samples. Labels are not reachable from this type.
#[derive(Debug)]
pub struct UnlabeledEvents(EventLoader);

impl UnlabeledEvents {
    pub fn len(&self) -> usize {
        self.0.store.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<EventTensor> {
        self.0.get(i)
    }
}

/// Held-out event samples with labels, for evaluation only.
#[derive(Debug)]
pub struct LabeledEvents(EventLoader);

impl LabeledEvents {
    pub fn len(&self) -> usize {
        self.0.store.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<(EventTensor, usize)> {
        Ok((self.0.get(i)?, self.label(i)))
    }

    pub fn label(&self, i: usize) -> usize {
        self.0.store.records[i].class
    }

    pub fn records(&self) -> &[Record] {
        &self.0.store.records
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub classes: Vec<String>,
    frames: [FrameSet; 3],
    events_train: UnlabeledEvents,
    events_val: LabeledEvents,
    events_test: LabeledEvents,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn frames(&self, split: Split) -> &FrameSet {
        &self.frames[split as usize]
    }

    pub fn train_events(&self) -> &UnlabeledEvents {
        &self.events_train
    }

    pub fn val_events(&self) -> &LabeledEvents {
        &self.events_val
    }

    pub fn test_events(&self) -> &LabeledEvents {
        &self.events_test
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::ingestion(path, e))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// `(class, id) -> path` for every recognized file of one domain.
fn scan(root: &Path, domain: Domain, classes: &[String]) -> Result<BTreeMap<(String, String), PathBuf>> {
    let mut found = BTreeMap::new();
    for class in classes {
        let dir = root.join(domain.dir()).join(class);
        if !dir.is_dir() {
            return Err(Error::ingestion(&dir, "missing class directory"));
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::ingestion(&dir, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            let (Some(ext), Some(stem)) = (ext, path.file_stem().and_then(|s| s.to_str())) else {
                continue;
            };
            if !path.is_file() || !domain.accepts(&ext) {
                continue;
            }
            if let Some(prev) = found.insert((class.clone(), stem.to_string()), path.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate sample id `{class}/{stem}`: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(found)
}

/// Discovers classes and samples under `spec.root` and assigns splits.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = &spec.root;
    let frame_dir = root.join("frames");
    let event_dir = root.join("events");
    for d in [&frame_dir, &event_dir] {
        if !d.is_dir() {
            return Err(Error::ingestion(d, "missing domain directory"));
        }
    }
    let frame_classes = sorted_dirs(&frame_dir)?;
    let event_classes = sorted_dirs(&event_dir)?;
    let all: BTreeSet<&String> = frame_classes.iter().chain(&event_classes).collect();
    for c in &all {
        for (domain, list) in [(Domain::Frames, &frame_classes), (Domain::Events, &event_classes)] {
            if !list.contains(c) {
                return Err(Error::ingestion(root.join(domain.dir()).join(c), "missing class directory"));
            }
        }
    }
    let classes = frame_classes;
    if classes.len() < 2 {
        return Err(Error::ingestion(root, format!("found {} classes, need at least 2", classes.len())));
    }
    if let Some(k) = spec.classes {
        if k != classes.len() {
            return Err(Error::Validation(format!("expected {k} classes, found {}", classes.len())));
        }
    }
    let class_index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::ingestion(&manifest_path, e))?;
        Some(manifest::parse(&text, &manifest_path)?)
    } else {
        None
    };

    let mut splits: BTreeMap<Domain, [Vec<Record>; 3]> = BTreeMap::new();
    for domain in [Domain::Frames, Domain::Events] {
        let files = scan(root, domain, &classes)?;
        let mut out: [Vec<Record>; 3] = Default::default();
        match &manifest {
            Some(rows) => {
                let rows: Vec<&ManifestRow> = rows.iter().filter(|r| r.domain == domain).collect();
                let mut seen = BTreeSet::new();
                for r in &rows {
                    if !seen.insert((r.class.as_str(), r.id.as_str())) {
                        return Err(Error::Validation(format!(
                            "manifest lists `{}/{}` twice in {}",
                            r.class,
                            r.id,
                            domain.dir()
                        )));
                    }
                    let &class = class_index
                        .get(r.class.as_str())
                        .ok_or_else(|| Error::ingestion(root.join(domain.dir()).join(&r.class), "missing class directory"))?;
                    let path = files
                        .get(&(r.class.clone(), r.id.clone()))
                        .ok_or_else(|| Error::ingestion(root.join(domain.dir()).join(&r.class).join(&r.id), "listed in manifest but not found"))?;
                    if let Some(expected) = &r.sha256 {
                        let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e))?;
                        if &format!("{:x}", Sha256::digest(&bytes)) != expected {
                            return Err(Error::Validation(format!("checksum mismatch for {}", path.display())));
                        }
                    }
                    out[r.split as usize].push(Record {
                        key: format!("{}/{}", r.class, r.id),
                        class,
                        path: path.clone(),
                    });
                }
                if rows.len() != files.len() {
                    return Err(Error::Validation(format!(
                        "manifest lists {} {} files but {} exist",
                        rows.len(),
                        domain.dir(),
                        files.len()
                    )));
                }
            }
            None => {
                for ((class, id), path) in &files {
                    let key = format!("{class}/{id}");
                    out[spec.split_of(&key) as usize].push(Record {
                        key,
                        class: class_index[class.as_str()],
                        path: path.clone(),
                    });
                }
            }
        }
        for v in out.iter_mut() {
            v.sort_by(|a, b| a.key.cmp(&b.key));
        }
        splits.insert(domain, out);
    }

    let [f_train, f_val, f_test] = splits.remove(&Domain::Frames).unwrap_or_default();
    let [e_train, e_val, e_test] = splits.remove(&Domain::Events).unwrap_or_default();
    let res = (spec.height, spec.width);
    let frames = |records| FrameSet {
        store: Store::new(records, spec.cache),
        resolution: res,
    };
    let events = |records| EventLoader {
        store: Store::new(records, spec.cache),
        height: spec.height,
        width: spec.width,
        bins: spec.bins,
        norm: spec.event_norm,
    };
    Ok(Dataset {
        spec: spec.clone(),
        classes,
        frames: [frames(f_train), frames(f_val), frames(f_test)],
        events_train: UnlabeledEvents(events(e_train)),
        events_val: LabeledEvents(events(e_val)),
        events_test: LabeledEvents(events(e_test)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_core::{write_canonical, Event, EventStream, Polarity};
    use image::{Rgb, RgbImage};

    fn write_pair(root: &Path, class: &str, id: &str) {
        let fd = root.join("frames").join(class);
        let ed = root.join("events").join(class);
        fs::create_dir_all(&fd).unwrap();
        fs::create_dir_all(&ed).unwrap();
        RgbImage::from_pixel(4, 4, Rgb([10, 20, 30])).save(fd.join(format!("{id}.png"))).unwrap();
        let s = EventStream::new(vec![Event::new(0, 1, 1, Polarity::On)], 4, 4).unwrap();
        fs::write(ed.join(format!("{id}.evt")), write_canonical(&s)).unwrap();
    }

    fn spec(root: &Path) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::Caltech101Pair,
            root: root.to_path_buf(),
            height: 4,
            width: 4,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn discovers_classes_and_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b", "c"] {
            for i in 0..20 {
                write_pair(dir.path(), c, &format!("image_{i:04}"));
            }
        }
        let a = load_dataset(&spec(dir.path())).unwrap();
        let b = load_dataset(&spec(dir.path())).unwrap();
        assert_eq!(a.classes, vec!["a", "b", "c"]);
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            assert_eq!(a.frames(split).records(), b.frames(split).records());
            for r in a.frames(split).records() {
                assert!(seen.insert(r.key.clone()), "{} in two splits", r.key);
            }
        }
        assert_eq!(seen.len(), 60);
        let total_events = a.train_events().len() + a.val_events().len() + a.test_events().len();
        assert_eq!(total_events, 60);
        let (t, label) = a.test_events().get(0).unwrap();
        assert_eq!(t.shape(), (4, 4, 4));
        assert_eq!(label, a.test_events().label(0));
    }

    #[test]
    fn missing_class_directory_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "x");
        write_pair(dir.path(), "b", "x");
        fs::create_dir_all(dir.path().join("frames/c")).unwrap();
        assert!(matches!(load_dataset(&spec(dir.path())), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "x");
        write_pair(dir.path(), "b", "x");
        RgbImage::from_pixel(4, 4, Rgb([0, 0, 0]))
            .save(dir.path().join("frames/a/x.bmp"))
            .unwrap();
        assert!(matches!(load_dataset(&spec(dir.path())), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_checksums_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            classes: 2,
            per_class: 2,
            eval_per_class: 1,
            ..ToyConfig::default()
        };
        generate_toy_dataset(&cfg, 1, dir.path()).unwrap();
        let spec = DatasetSpec {
            root: dir.path().to_path_buf(),
            ..DatasetSpec::default()
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.frames(Split::Train).len(), 4);
        assert_eq!(ds.test_events().len(), 2);
        fs::write(dir.path().join("frames/circle/train_0000.png"), b"junk").unwrap();
        assert!(matches!(load_dataset(&spec), Err(Error::Validation(_))));
    }
}
