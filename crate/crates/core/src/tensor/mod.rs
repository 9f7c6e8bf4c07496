//! Image tensors, difference maps and scalar aggregation.
//!
//! Every image in the pipeline is an [`ImageTensor`]: `height × width × channels`
//! `f32` values in `[0, 1]`, stored row-major with channels innermost.

mod io;
mod stats;

use std::path::{Path, PathBuf};

pub use io::{load_image, load_native, read_native, save_native, save_png, write_native, NativeTensor};
pub use stats::{aggregate, quantile_sorted, Aggregates, AGGREGATE_NAMES};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    source: Option<PathBuf>,
}

impl ImageTensor {
    /// Builds a tensor, checking shape and value range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Channels(channels));
        }
        if height == 0 || width == 0 {
            return Err(Error::Empty("image with zero height or width"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(
                (height, width, channels),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::NonFinite(format!("pixel value {bad}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            source: None,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    /// Gray image from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
            source: None,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source = Some(path.into());
        self
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Channel-mean intensity at a pixel.
    pub fn luma(&self, row: usize, col: usize) -> f32 {
        if self.channels == 1 {
            return self.data[row * self.width + col];
        }
        let base = (row * self.width + col) * self.channels;
        let s: f32 = self.data[base..base + self.channels].iter().sum();
        s / self.channels as f32
    }

    /// Channel-mean reduction to a single channel.
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = (0..self.height * self.width)
            .map(|i| self.luma(i / self.width, i % self.width))
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
            source: self.source.clone(),
        }
    }

    /// Copies out the `height × width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::Invalid(format!(
                "crop ({row},{col}) {height}x{width} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = (r * self.width + col) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageTensor {
            height,
            width,
            channels: self.channels,
            data,
            source: None,
        })
    }

    pub fn same_dims(&self, other: &ImageTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(self.dims(), other.dims()));
        }
        Ok(())
    }
}

/// Channel-reduced absolute difference between an image and its reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DiffMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dims((height, width), format!("{} values", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NonFinite(format!("difference value {bad}")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Per-pixel mean over channels of `|a - b|`.
pub fn abs_diff(a: &ImageTensor, b: &ImageTensor) -> Result<DiffMap> {
    a.same_dims(b)?;
    let c = a.channels;
    let values = a
        .data
        .chunks_exact(c)
        .zip(b.data.chunks_exact(c))
        .map(|(pa, pb)| {
            let s: f32 = pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum();
            s / c as f32
        })
        .collect();
    Ok(DiffMap {
        height: a.height,
        width: a.width,
        values,
    })
}

/// Mean squared element difference of two equally long slices.
pub fn mse_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("mse of empty vectors"));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Whole-image pixel MSE.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_dims(b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}
