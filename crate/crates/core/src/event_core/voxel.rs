use serde::{Deserialize, Serialize};

use super::{EventStream, Polarity};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EventNorm {
    #[default]
    RawCounts,
    /// Divides by the largest absolute entry (all-zero tensors stay zero).
    UnitMax,
    /// Zero mean, unit standard deviation over the whole tensor.
    Standardized,
}

/// Polarity-split count grid: channels `0..bins` hold positive events,
/// `bins..2*bins` negative ones.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTensor {
    grid: Grid,
    bins: usize,
    norm: EventNorm,
}

impl EventTensor {
    pub fn new(grid: Grid, bins: usize, norm: EventNorm) -> Result<Self> {
        if bins == 0 || grid.channels() != 2 * bins {
            return Err(Error::Contract(format!(
                "event tensor with {bins} bins needs {} channels, got {}",
                2 * bins,
                grid.channels()
            )));
        }
        Ok(Self { grid, bins, norm })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_grid(self) -> Grid {
        self.grid
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn norm(&self) -> EventNorm {
        self.norm
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.shape()
    }

    pub(crate) fn with_grid(&self, grid: Grid) -> Self {
        Self {
            grid,
            bins: self.bins,
            norm: self.norm,
        }
    }

    /// Re-normalizes a raw-count tensor.
    pub fn normalized(&self, norm: EventNorm) -> Self {
        let grid = match norm {
            EventNorm::RawCounts => self.grid.clone(),
            EventNorm::UnitMax => {
                let m = self
                    .grid
                    .data()
                    .iter()
                    .fold(0.0f32, |acc, v| acc.max(v.abs()));
                if m > 0.0 {
                    self.grid.map(|v| v / m)
                } else {
                    self.grid.clone()
                }
            }
            EventNorm::Standardized => {
                let n = self.grid.data().len() as f64;
                let mean = self.grid.sum() / n;
                let var = self
                    .grid
                    .data()
                    .iter()
                    .map(|&v| (f64::from(v) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let std = var.sqrt();
                if std > 0.0 {
                    self.grid.map(|v| ((f64::from(v) - mean) / std) as f32)
                } else {
                    self.grid.map(|v| (f64::from(v) - mean) as f32)
                }
            }
        };
        Self {
            grid,
            bins: self.bins,
            norm,
        }
    }
}

fn scale_coord(v: u16, sensor: u32, out: usize) -> usize {
    let f = (f64::from(v) + 0.5) * out as f64 / f64::from(sensor) - 0.5;
    (f.round().max(0.0) as usize).min(out - 1)
}

/// Accumulates a stream into a `(2*bins, height, width)` raw-count grid.
///
/// Time is cut into `bins` equal slices of `[t_min, t_max]`; coordinates are
/// mapped to the output grid by nearest-integer scaling of pixel centres.
pub fn voxelize(s: &EventStream, height: usize, width: usize, bins: usize) -> Result<EventTensor> {
    if bins == 0 {
        return Err(Error::Argument("voxelize needs at least one time bin".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::Argument("voxelize needs a non-empty output grid".into()));
    }
    let mut grid = Grid::zeros(2 * bins, height, width);
    if let Some((t0, t1)) = s.time_range() {
        let span = (t1 - t0) as f64;
        for e in s.events() {
            let bin = if span > 0.0 {
                (((e.t - t0) as f64 / span * bins as f64).floor() as usize).min(bins - 1)
            } else {
                0
            };
            let c = match e.polarity {
                Polarity::On => bin,
                Polarity::Off => bins + bin,
            };
            let y = scale_coord(e.y, s.height(), height);
            let x = scale_coord(e.x, s.width(), width);
            grid.add_at(c, y, x, 1.0);
        }
    }
    EventTensor::new(grid, bins, EventNorm::RawCounts)
}
