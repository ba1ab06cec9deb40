//! Stochastic view generation for the contrastive terms.
//!
//! Frames and events have separate menus. A transform that belongs to the
//! other menu is rejected at validation time, so an event tensor can never be
//! colour-jittered and a frame can never be event-shifted.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Sampling};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Menu {
    Frame,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub menu: Menu,
    /// Output `[height, width]`; `None` keeps the input size.
    pub out_size: Option<[usize; 2]>,

    pub flip: bool,
    pub flip_prob: f64,

    /// Integer spatial translation, event menu only.
    pub shift: bool,
    pub shift_max: u32,

    /// Zoom in or out around the centre, keeping the spatial size.
    pub resize: bool,
    pub resize_scale: [f64; 2],

    /// Rotation plus translation, frame menu only.
    pub affine: bool,
    pub affine_degrees: f64,
    pub affine_translate: f64,

    /// Random window whose side is a fraction of the input side, resampled
    /// to the output size. A fraction above 1 cannot be satisfied.
    pub crop: bool,
    pub crop_scale: [f64; 2],

    /// Brightness, contrast and saturation jitter, frame menu only.
    pub jitter: bool,
    pub jitter_strength: f64,

    /// Gaussian blur, frame menu only.
    pub blur: bool,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
}

impl AugmentConfig {
    /// No transform enabled; outputs equal inputs.
    pub fn identity(menu: Menu) -> Self {
        Self {
            menu,
            out_size: None,
            flip: false,
            flip_prob: 0.5,
            shift: false,
            shift_max: 4,
            resize: false,
            resize_scale: [0.8, 1.2],
            affine: false,
            affine_degrees: 10.0,
            affine_translate: 0.1,
            crop: false,
            crop_scale: [0.6, 1.0],
            jitter: false,
            jitter_strength: 0.4,
            blur: false,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
        }
    }

    /// Colour jitter, blur, resize, affine, crop and flip.
    pub fn frame_default() -> Self {
        Self {
            flip: true,
            resize: true,
            affine: true,
            crop: true,
            jitter: true,
            blur: true,
            ..Self::identity(Menu::Frame)
        }
    }

    /// Shift, flip, resize and crop.
    pub fn event_default() -> Self {
        Self {
            flip: true,
            shift: true,
            resize: true,
            crop: true,
            ..Self::identity(Menu::Event)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrong_menu = match self.menu {
            Menu::Frame => self.shift.then_some("shift"),
            Menu::Event => [
                (self.affine, "affine"),
                (self.jitter, "jitter"),
                (self.blur, "blur"),
            ]
            .into_iter()
            .find_map(|(on, n)| on.then_some(n)),
        };
        if let Some(name) = wrong_menu {
            return Err(Error::Argument(format!(
                "transform `{name}` is not on the {:?} menu",
                self.menu
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("{name} = {p} is not a probability")));
            }
        }
        for (name, [lo, hi]) in [
            ("resize_scale", self.resize_scale),
            ("crop_scale", self.crop_scale),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo <= hi && lo > 0.0) {
                return Err(Error::Argument(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.jitter_strength < 0.0 || self.affine_degrees < 0.0 || self.affine_translate < 0.0 {
            return Err(Error::Argument("augmentation magnitudes must be non-negative".into()));
        }
        if let Some([h, w]) = self.out_size {
            if h == 0 || w == 0 {
                return Err(Error::Argument("out_size must be positive".into()));
            }
        }
        Ok(())
    }

    fn sampling(&self) -> Sampling {
        match self.menu {
            Menu::Frame => Sampling::Bilinear,
            Menu::Event => Sampling::Nearest,
        }
    }
}

fn uniform(r: &mut rng::Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Runs the enabled transforms in a fixed order.
pub fn apply(input: &Grid, cfg: &AugmentConfig, seed: u64) -> Result<Grid> {
    cfg.validate()?;
    let (_, h, w) = input.shape();
    let [out_h, out_w] = cfg.out_size.unwrap_or([h, w]);
    if cfg.crop && cfg.crop_scale[1] > 1.0 {
        return Err(Error::Argument(format!(
            "crop window up to {}x the input side does not fit a {h}x{w} tensor",
            cfg.crop_scale[1]
        )));
    }
    let mut r = rng::rng_for(seed, &[]);
    let mut g = input.clone();

    if cfg.flip && r.gen_bool(cfg.flip_prob) {
        g = g.flip_horizontal();
    }
    if cfg.shift && cfg.shift_max > 0 {
        let m = i64::from(cfg.shift_max);
        let dx = r.gen_range(-m..=m);
        let dy = r.gen_range(-m..=m);
        g = g.translate(dx, dy);
    }
    if cfg.resize {
        let s = uniform(&mut r, cfg.resize_scale);
        g = zoom(&g, s, cfg.sampling());
    }
    if cfg.affine {
        let deg = r.gen_range(-cfg.affine_degrees..=cfg.affine_degrees);
        let tx = r.gen_range(-cfg.affine_translate..=cfg.affine_translate) * w as f64;
        let ty = r.gen_range(-cfg.affine_translate..=cfg.affine_translate) * h as f64;
        g = affine(&g, deg, tx, ty);
    }
    if cfg.crop {
        let s = uniform(&mut r, cfg.crop_scale);
        let ch = ((h as f64 * s).round() as usize).clamp(1, h);
        let cw = ((w as f64 * s).round() as usize).clamp(1, w);
        let top = r.gen_range(0..=h - ch);
        let left = r.gen_range(0..=w - cw);
        g = g.crop(top, left, ch, cw)?;
    }
    if g.height() != out_h || g.width() != out_w {
        g = g.resize(out_h, out_w, cfg.sampling());
    }
    if cfg.jitter && cfg.jitter_strength > 0.0 {
        let s = cfg.jitter_strength;
        let b = r.gen_range(1.0 - s..=1.0 + s).max(0.0) as f32;
        let c = r.gen_range(1.0 - s..=1.0 + s).max(0.0) as f32;
        let sat = r.gen_range(1.0 - s..=1.0 + s).max(0.0) as f32;
        g = color_jitter(&g, b, c, sat);
    }
    if cfg.blur && r.gen_bool(cfg.blur_prob) {
        let sigma = uniform(&mut r, cfg.blur_sigma);
        g = gaussian_blur(&g, sigma as f32);
    }
    if cfg.menu == Menu::Frame {
        g = g.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(g)
}

/// Scales content about the centre by `s`, keeping the grid size.
fn zoom(g: &Grid, s: f64, sampling: Sampling) -> Grid {
    let (c, h, w) = g.shape();
    let mut out = Grid::zeros(c, h, w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for ch in 0..c {
        for y in 0..h {
            let sy = ((y as f64 - cy) / s + cy) as f32;
            for x in 0..w {
                let sx = ((x as f64 - cx) / s + cx) as f32;
                out.set(ch, y, x, g.sample(ch, sy, sx, sampling));
            }
        }
    }
    out
}

fn affine(g: &Grid, degrees: f64, tx: f64, ty: f64) -> Grid {
    let (c, h, w) = g.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Grid::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            // inverse map: undo translation, then rotate back about the centre
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = (cos * dx + sin * dy + cx) as f32;
            let sy = (-sin * dx + cos * dy + cy) as f32;
            for ch in 0..c {
                out.set(ch, y, x, g.sample(ch, sy, sx, Sampling::Bilinear));
            }
        }
    }
    out
}

fn color_jitter(g: &Grid, brightness: f32, contrast: f32, saturation: f32) -> Grid {
    let (c, h, w) = g.shape();
    let mut out = g.map(|v| v * brightness);
    if c != 3 {
        return out;
    }
    let n = h * w;
    let gray = |o: &Grid, i: usize| {
        let d = o.data();
        0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]
    };
    let mean = (0..n).map(|i| gray(&out, i)).sum::<f32>() / n as f32;
    for v in out.data_mut() {
        *v = (*v - mean) * contrast + mean;
    }
    let grays: Vec<f32> = (0..n).map(|i| gray(&out, i)).collect();
    let d = out.data_mut();
    for ch in 0..3 {
        for (i, gv) in grays.iter().enumerate() {
            let v = &mut d[ch * n + i];
            *v = gv + (*v - gv) * saturation;
        }
    }
    out
}

fn gaussian_blur(g: &Grid, sigma: f32) -> Grid {
    let radius = (2.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / norm).collect();
    let (c, h, w) = g.shape();
    let mut tmp = Grid::zeros(c, h, w);
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * g.get(ch, y, sx);
                }
                tmp.set(ch, y, x, acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp.get(ch, sy, x);
                }
                out.set(ch, y, x, acc);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Grid {
        let mut r = rng::rng_for(seed, &[]);
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let g = noise(3, 8, 8, 1);
        for menu in [Menu::Frame, Menu::Event] {
            assert_eq!(apply(&g, &AugmentConfig::identity(menu), 99).unwrap(), g);
        }
    }

    #[test]
    fn menus_reject_foreign_transforms() {
        let mut cfg = AugmentConfig::identity(Menu::Event);
        cfg.jitter = true;
        assert!(matches!(cfg.validate(), Err(Error::Argument(_))));
        let mut cfg = AugmentConfig::identity(Menu::Frame);
        cfg.shift = true;
        assert!(matches!(cfg.validate(), Err(Error::Argument(_))));
        assert!(AugmentConfig::frame_default().validate().is_ok());
        assert!(AugmentConfig::event_default().validate().is_ok());
    }

    #[test]
    fn oversized_crop_is_argument_error() {
        let mut cfg = AugmentConfig::identity(Menu::Event);
        cfg.crop = true;
        cfg.crop_scale = [1.0, 1.5];
        assert!(matches!(apply(&noise(2, 8, 8, 0), &cfg, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn defaults_are_deterministic_and_keep_shape() {
        let g = noise(3, 16, 16, 4);
        let mut cfg = AugmentConfig::frame_default();
        cfg.out_size = Some([12, 12]);
        let a = apply(&g, &cfg, 5).unwrap();
        let b = apply(&g, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (3, 12, 12));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let e = noise(10, 16, 16, 4);
        let out = apply(&e, &AugmentConfig::event_default(), 5).unwrap();
        assert_eq!(out.shape(), (10, 16, 16));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let g = Grid::filled(3, 9, 9, 0.3);
        let b = gaussian_blur(&g, 1.5);
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn zero_rotation_affine_is_identity() {
        let g = noise(1, 7, 7, 2);
        let a = affine(&g, 0.0, 0.0, 0.0);
        for (x, y) in a.data().iter().zip(g.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
