//! Synthetic two-domain shape benchmark.
//!
//! Frames are anti-aliased colored shapes on smooth backgrounds. Event
//! samples come from moving an independently posed grayscale rendering of the
//! same shape class along a short straight trajectory and quantizing each
//! pixel's log intensity into steps of `threshold`; every step crossed between
//! consecutive positions emits one event.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{ManifestRow, MANIFEST_FILE};
use super::{Domain, Split};
use crate::error::{Error, Result};
use crate::event_core::{write_canonical, Event, EventStream, Polarity};
use crate::rng::{self, Rng};

pub const SHAPES: [&str; 10] = [
    "circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar", "frame", "xcross",
];

/// Event timestamps advance this many microseconds per trajectory step.
pub const STEP_MICROS: u64 = 1000;

/// Offset keeping the log of a zero intensity finite.
const LOG_OFFSET: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: usize,
    /// Training samples per class and domain.
    pub per_class: usize,
    /// Validation and test samples per class and domain.
    pub eval_per_class: usize,
    pub size: usize,
    /// Log-intensity step per event.
    pub threshold: f64,
    pub trajectory_len: usize,
    /// Pixels moved per trajectory step.
    pub speed: f64,
    /// Expected noise events per pixel per sample.
    pub noise_rate: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 100,
            eval_per_class: 20,
            size: 32,
            threshold: 0.25,
            trajectory_len: 6,
            speed: 1.0,
            noise_rate: 0.01,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > SHAPES.len() {
            return Err(Error::Argument(format!(
                "toy classes must lie in [2, {}], got {}",
                SHAPES.len(),
                self.classes
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Argument(format!("threshold must be positive, got {}", self.threshold)));
        }
        if self.trajectory_len == 0 {
            return Err(Error::Argument("trajectory length must be at least 1".into()));
        }
        if self.size < 8 || self.size > u16::MAX as usize {
            return Err(Error::Argument(format!("image size {} out of range", self.size)));
        }
        if self.per_class == 0 {
            return Err(Error::Argument("per_class must be positive".into()));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) || !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::Argument("speed and noise_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Placement of a shape: centre, radius and rotation (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

/// Whether the point `(u, v)`, in shape units (radius 1, unrotated), is inside.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match SHAPES[shape] {
        "circle" => u * u + v * v <= 1.0,
        "square" => au <= 0.75 && av <= 0.75,
        "triangle" => v <= 0.7 && v >= -0.9 + 1.6 * au * 1.1,
        "cross" => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        "ring" => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        "diamond" => au + av <= 1.0,
        "hbar" => au <= 1.0 && av <= 0.35,
        "vbar" => au <= 0.35 && av <= 1.0,
        "frame" => au <= 0.85 && av <= 0.85 && (au >= 0.5 || av >= 0.5),
        "xcross" => {
            let (d1, d2) = ((u - v).abs(), (u + v).abs());
            (d1 <= 0.4 || d2 <= 0.4) && au <= 0.85 && av <= 0.85
        }
        _ => false,
    }
}

const SUPERSAMPLE: usize = 4;

/// Anti-aliased coverage of `shape` at `pose` over a `size x size` grid.
pub fn coverage(shape: usize, pose: &Pose, size: usize) -> Vec<f64> {
    let (s, c) = pose.angle.sin_cos();
    let n = SUPERSAMPLE;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f64 + (sx as f64 + 0.5) / n as f64 - pose.cx;
                    let py = y as f64 + (sy as f64 + 0.5) / n as f64 - pose.cy;
                    let u = (c * px + s * py) / pose.radius;
                    let v = (-s * px + c * py) / pose.radius;
                    if inside(shape, u, v) {
                        hits += 1;
                    }
                }
            }
            out[y * size + x] = hits as f64 / (n * n) as f64;
        }
    }
    out
}

fn random_pose(r: &mut Rng, size: usize) -> Pose {
    let s = size as f64;
    let radius = r.gen_range(0.22..0.34) * s;
    let margin = radius + 1.0;
    Pose {
        cx: r.gen_range(margin..(s - margin).max(margin + 1e-6)),
        cy: r.gen_range(margin..(s - margin).max(margin + 1e-6)),
        radius,
        angle: r.gen_range(-0.25..0.25),
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(r: &mut Rng) -> [f64; 3] {
    [r.gen(), r.gen(), r.gen()]
}

/// RGB rendering in `[0, 1]`, channel-major.
pub fn render_frame(shape: usize, r: &mut Rng, size: usize) -> Vec<f64> {
    let pose = random_pose(r, size);
    let bg0 = random_color(r);
    let bg1 = random_color(r);
    let (gx, gy) = {
        let a: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        (a.cos(), a.sin())
    };
    let bg_lum = 0.5 * (luminance(bg0) + luminance(bg1));
    let fg = loop {
        let c = random_color(r);
        if (luminance(c) - bg_lum).abs() > 0.3 {
            break c;
        }
    };
    let cov = coverage(shape, &pose, size);
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * ((x as f64 / size as f64 - 0.5) * gx + (y as f64 / size as f64 - 0.5) * gy);
            let a = cov[y * size + x];
            for ch in 0..3 {
                let bg = bg0[ch] * (1.0 - t) + bg1[ch] * t;
                out[ch * size * size + y * size + x] = bg * (1.0 - a) + fg[ch] * a;
            }
        }
    }
    out
}

/// Events for the level crossings between two log-intensity images.
///
/// A pixel whose quantized level `floor(L / threshold)` changes by `n` emits
/// `|n|` events of the sign of `n`, spread evenly over `(t0, t0 + dt)`.
pub fn threshold_events(prev: &[f64], next: &[f64], width: usize, threshold: f64, t0: u64, dt: u64) -> Vec<Event> {
    let mut out = Vec::new();
    for (i, (&a, &b)) in prev.iter().zip(next).enumerate() {
        let n = (b / threshold).floor() as i64 - (a / threshold).floor() as i64;
        if n == 0 {
            continue;
        }
        let pol = if n > 0 { Polarity::On } else { Polarity::Off };
        let count = n.unsigned_abs();
        for j in 0..count {
            let t = t0 + (j + 1) * dt / (count + 1);
            out.push(Event::new(t, (i % width) as u16, (i / width) as u16, pol));
        }
    }
    out
}

/// Log-intensity images of `shape` translated along `path` over a fixed
/// background.
pub fn log_frames(shape: usize, pose: &Pose, path: &[(f64, f64)], fg: f64, bg: f64, size: usize) -> Vec<Vec<f64>> {
    path.iter()
        .map(|&(dx, dy)| {
            let p = Pose {
                cx: pose.cx + dx,
                cy: pose.cy + dy,
                ..*pose
            };
            coverage(shape, &p, size)
                .into_iter()
                .map(|a| (bg * (1.0 - a) + fg * a + LOG_OFFSET).ln())
                .collect()
        })
        .collect()
}

/// Events of a sequence of log-intensity images, sorted by time.
pub fn events_from_log_frames(frames: &[Vec<f64>], width: usize, threshold: f64) -> Vec<Event> {
    let mut out = Vec::new();
    for (k, pair) in frames.windows(2).enumerate() {
        out.extend(threshold_events(&pair[0], &pair[1], width, threshold, k as u64 * STEP_MICROS, STEP_MICROS));
    }
    out.sort_by_key(|e| e.t);
    out
}

/// One event sample of class `shape`.
pub fn render_events(shape: usize, cfg: &ToyConfig, r: &mut Rng) -> Result<EventStream> {
    let size = cfg.size;
    let pose = random_pose(r, size);
    let dir: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let (vx, vy) = (dir.cos() * cfg.speed, dir.sin() * cfg.speed);
    let half = cfg.trajectory_len as f64 / 2.0;
    let path: Vec<(f64, f64)> = (0..=cfg.trajectory_len)
        .map(|k| ((k as f64 - half) * vx, (k as f64 - half) * vy))
        .collect();
    let bg: f64 = r.gen_range(0.05..0.95);
    let fg = loop {
        let c: f64 = r.gen_range(0.0..1.0);
        if (c - bg).abs() > 0.3 {
            break c;
        }
    };
    let frames = log_frames(shape, &pose, &path, fg, bg, size);
    let mut events = events_from_log_frames(&frames, size, cfg.threshold);
    let duration = cfg.trajectory_len as u64 * STEP_MICROS;
    let expected = cfg.noise_rate * (size * size) as f64;
    let noise = expected.floor() as usize + usize::from(r.gen::<f64>() < expected.fract());
    for _ in 0..noise {
        let pol = if r.gen::<bool>() { Polarity::On } else { Polarity::Off };
        events.push(Event::new(
            r.gen_range(0..duration.max(1)),
            r.gen_range(0..size) as u16,
            r.gen_range(0..size) as u16,
            pol,
        ));
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(events, size as u32, size as u32)
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes the benchmark under `root`: `frames/<class>/<id>.png`,
/// `events/<class>/<id>.evt` and a manifest with fixed splits. Frame and
/// event samples use independent draws, so no pairing exists.
pub fn generate_toy_dataset(cfg: &ToyConfig, seed: u64, root: &Path) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let splits = [
        (Split::Train, cfg.per_class),
        (Split::Val, cfg.eval_per_class),
        (Split::Test, cfg.eval_per_class),
    ];
    for class in 0..cfg.classes {
        let name = SHAPES[class];
        for domain in [Domain::Frames, Domain::Events] {
            fs::create_dir_all(root.join(domain.dir()).join(name))?;
        }
        for (split, count) in splits {
            for i in 0..count {
                let id = format!("{}_{i:04}", split.name());
                let path = [rng::tag::TOY, class as u64, split as u64, i as u64];

                let mut fr = rng::rng_for(seed, &[path[0], path[1], path[2], path[3], 0]);
                let px = render_frame(class, &mut fr, cfg.size);
                let img = RgbImage::from_fn(cfg.size as u32, cfg.size as u32, |x, y| {
                    let at = |c: usize| (px[c * cfg.size * cfg.size + y as usize * cfg.size + x as usize] * 255.0).round() as u8;
                    Rgb([at(0), at(1), at(2)])
                });
                let mut png = Vec::new();
                img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                    .map_err(|e| Error::Export(e.to_string()))?;
                let rel = format!("{name}/{id}.png");
                fs::write(root.join("frames").join(&rel), &png)?;
                rows.push(ManifestRow {
                    domain: Domain::Frames,
                    class: name.to_string(),
                    id: id.clone(),
                    split,
                    sha256: Some(sha256_hex(&png)),
                });

                let mut er = rng::rng_for(seed, &[path[0], path[1], path[2], path[3], 1]);
                let stream = render_events(class, cfg, &mut er)?;
                let bytes = write_canonical(&stream);
                fs::write(root.join("events").join(format!("{name}/{id}.evt")), &bytes)?;
                rows.push(ManifestRow {
                    domain: Domain::Events,
                    class: name.to_string(),
                    id,
                    split,
                    sha256: Some(sha256_hex(&bytes)),
                });
            }
        }
    }
    let mut f = fs::File::create(root.join(MANIFEST_FILE))?;
    f.write_all(super::manifest::render(&rows).as_bytes())?;
    fs::write(
        root.join("toy.toml"),
        toml::to_string(cfg).map_err(|e| Error::Export(e.to_string()))?,
    )?;
    Ok(rows)
}
