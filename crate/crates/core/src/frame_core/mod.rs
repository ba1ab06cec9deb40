//! Frame images and two-view generation.

pub mod augment;

use std::path::Path;

pub use augment::{AugmentConfig, Menu};

use crate::error::{Error, Result};
use crate::event_core::{augment_events, EventTensor};
use crate::grid::Grid;
use crate::rng;

/// RGB frame with values in `[0, 1]` and its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    grid: Grid,
    label: usize,
}

impl FrameTensor {
    pub fn new(grid: Grid, label: usize) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(Error::Contract(format!(
                "frames have 3 channels, got {}",
                grid.channels()
            )));
        }
        if let Some(v) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { grid, label })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.grid.height(), self.grid.width())
    }
}

/// Decodes an image file and resizes it to `resolution` (height, width).
pub fn load_frame(path: &Path, resolution: (usize, usize), label: usize) -> Result<FrameTensor> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?;
    let rgb = img.to_rgb8();
    let (h, w) = resolution;
    let rgb = if rgb.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(
            &rgb,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        rgb
    };
    let mut grid = Grid::zeros(3, h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            grid.set(c, y as usize, x as usize, f32::from(px[c]) / 255.0);
        }
    }
    FrameTensor::new(grid, label)
}

/// A sample from either domain, as consumed by [`two_view`].
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Frame(FrameTensor),
    Event(EventTensor),
}

/// Sub-seeds for the two views of one sample.
pub fn view_seeds(seed: u64) -> (u64, u64) {
    (
        rng::derive(seed, &[rng::tag::VIEW_ONE]),
        rng::derive(seed, &[rng::tag::VIEW_TWO]),
    )
}

/// Augments one sample of either domain with the matching menu.
pub fn augment_sample(x: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    match (x, cfg.menu) {
        (Sample::Frame(f), Menu::Frame) => {
            let grid = augment::apply(f.grid(), cfg, seed)?;
            Ok(Sample::Frame(FrameTensor {
                grid,
                label: f.label,
            }))
        }
        (Sample::Event(e), Menu::Event) => Ok(Sample::Event(augment_events(e, cfg, seed)?)),
        (Sample::Frame(_), Menu::Event) => Err(Error::Argument(
            "frame sample paired with the event augmentation menu".into(),
        )),
        (Sample::Event(_), Menu::Frame) => Err(Error::Argument(
            "event sample paired with the frame augmentation menu".into(),
        )),
    }
}

/// Two independently augmented views of `x`, reproducible from `seed`.
pub fn two_view(x: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<(Sample, Sample)> {
    let (s1, s2) = view_seeds(seed);
    Ok((augment_sample(x, cfg, s1)?, augment_sample(x, cfg, s2)?))
}
