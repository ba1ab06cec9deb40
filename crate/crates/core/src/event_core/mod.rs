//! Raw event streams, their on-disk formats, and dense tensor conversion.

mod io;
mod voxel;

pub use io::{parse_event_stream, write_canonical, EventFormat, CANONICAL_MAGIC};
pub use voxel::{voxelize, EventNorm, EventTensor};

use crate::error::{Error, Result};
use crate::frame_core::augment::{self, AugmentConfig, Menu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_sign(p: i8) -> Option<Self> {
        match p {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

/// One brightness-change event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// The events recorded for one sample on a `width x height` sensor.
///
/// Construction validates ordering and bounds, so every live `EventStream`
/// has non-decreasing timestamps and in-range coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
    label: Option<usize>,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "sensor size {width}x{height} must be positive"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(Error::Validation(format!(
                    "event {i} at ({}, {}) lies outside the {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::Validation(format!(
                    "timestamp of event {i} ({}) precedes its predecessor ({})",
                    e.t,
                    events[i - 1].t
                )));
            }
        }
        Ok(Self {
            events,
            width,
            height,
            label: None,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(Vec::new(), width, height)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn time_range(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

/// Applies the event augmentation menu. Deterministic in `(cfg, seed)`.
pub fn augment_events(t: &EventTensor, cfg: &AugmentConfig, seed: u64) -> Result<EventTensor> {
    if cfg.menu != Menu::Event {
        return Err(Error::Argument(
            "event tensors need an augmentation config with the event menu".into(),
        ));
    }
    let grid = augment::apply(t.grid(), cfg, seed)?;
    Ok(t.with_grid(grid))
}
