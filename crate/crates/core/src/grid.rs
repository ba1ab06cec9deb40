//! Dense channel-major image buffers shared by the frame and event pipelines.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `(channels, height, width)` grid of `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Interpolation used when a grid is resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Nearest,
    Bilinear,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Contract(format!(
                "buffer of {} values cannot form a {channels}x{height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] += v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = self.index(c, y, 0);
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    /// Integer translation with zero fill: `out[c, y, x] = in[c, y - dy, x - dx]`.
    pub fn translate(&self, dx: i64, dy: i64) -> Self {
        let mut out = Self::zeros(self.channels, self.height, self.width);
        let (h, w) = (self.height as i64, self.width as i64);
        for c in 0..self.channels {
            for y in 0..h {
                let sy = y - dy;
                if sy < 0 || sy >= h {
                    continue;
                }
                for x in 0..w {
                    let sx = x - dx;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    out.set(
                        c,
                        y as usize,
                        x as usize,
                        self.get(c, sy as usize, sx as usize),
                    );
                }
            }
        }
        out
    }

    /// Copies the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Argument(format!(
                "crop window {height}x{width} at ({top},{left}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = self.index(c, top + y, left);
                let dst = out.index(c, y, 0);
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        Ok(out)
    }

    /// Resamples to a new spatial size using pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize, sampling: Sampling) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Self::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let fy = (y as f32 + 0.5) * sy - 0.5;
                for x in 0..width {
                    let fx = (x as f32 + 0.5) * sx - 0.5;
                    let v = match sampling {
                        Sampling::Nearest => {
                            let iy = (fy.round().max(0.0) as usize).min(self.height - 1);
                            let ix = (fx.round().max(0.0) as usize).min(self.width - 1);
                            self.get(c, iy, ix)
                        }
                        Sampling::Bilinear => self.sample_bilinear_clamped(c, fy, fx),
                    };
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    fn sample_bilinear_clamped(&self, c: usize, fy: f32, fx: f32) -> f32 {
        let fy = fy.clamp(0.0, (self.height - 1) as f32);
        let fx = fx.clamp(0.0, (self.width - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let ty = fy - y0 as f32;
        let tx = fx - x0 as f32;
        let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
        let bottom = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Samples at a fractional location; points outside the grid read as zero.
    pub fn sample(&self, c: usize, fy: f32, fx: f32, sampling: Sampling) -> f32 {
        let (h, w) = (self.height as f32, self.width as f32);
        match sampling {
            Sampling::Nearest => {
                let (iy, ix) = (fy.round(), fx.round());
                if iy < 0.0 || ix < 0.0 || iy >= h || ix >= w {
                    0.0
                } else {
                    self.get(c, iy as usize, ix as usize)
                }
            }
            Sampling::Bilinear => {
                if fy <= -1.0 || fx <= -1.0 || fy >= h || fx >= w {
                    return 0.0;
                }
                let y0 = fy.floor();
                let x0 = fx.floor();
                let ty = fy - y0;
                let tx = fx - x0;
                let at = |yy: f32, xx: f32| -> f32 {
                    if yy < 0.0 || xx < 0.0 || yy >= h || xx >= w {
                        0.0
                    } else {
                        self.get(c, yy as usize, xx as usize)
                    }
                };
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1.0) * tx;
                let bottom = at(y0 + 1.0, x0) * (1.0 - tx) + at(y0 + 1.0, x0 + 1.0) * tx;
                top * (1.0 - ty) + bottom * ty
            }
        }
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(c, h, w, data)
    }
}

/// Stacks same-shaped grids into an `(N, C, H, W)` tensor.
pub fn stack(grids: &[&Grid], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(grids.len() * c * h * w);
    for g in grids {
        if g.shape() != (c, h, w) {
            return Err(Error::Contract(format!(
                "batch mixes {:?} and {:?} grids",
                (c, h, w),
                g.shape()
            )));
        }
        data.extend_from_slice(g.data());
    }
    let t = Tensor::from_vec(data, (grids.len(), c, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}
