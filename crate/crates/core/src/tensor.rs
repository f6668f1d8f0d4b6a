//! Dense row-major buffers: [`Tensor`] for channel-first images and feature
//! maps, [`Grid`] for single-plane maps (heatmaps, masks).

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// A `channels × height × width` buffer stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resize of every channel (pixel-center aligned).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Tensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = Grid {
                rows: self.height,
                cols: self.width,
                data: self.plane(c).to_vec(),
            };
            let dst = src.resize_bilinear(height, width);
            out.plane_mut(c).copy_from_slice(&dst.data);
        }
        out
    }
}

/// A single `rows × cols` plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a grid from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| (i / self.cols, i % self.cols))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(|r| r.to_vec()).collect()
    }

    /// Bilinear resize, aligning pixel centers.
    pub fn resize_bilinear(&self, rows: usize, cols: usize) -> Grid {
        if rows == self.rows && cols == self.cols {
            return self.clone();
        }
        let mut out = Grid::zeros(rows, cols);
        if self.rows == 0 || self.cols == 0 {
            return out;
        }
        let sy = self.rows as f64 / rows as f64;
        let sx = self.cols as f64 / cols as f64;
        for r in 0..rows {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.rows - 1) as f64);
            let y0 = math::floor(fy) as usize;
            let y1 = (y0 + 1).min(self.rows - 1);
            let ty = fy - y0 as f64;
            for c in 0..cols {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.cols - 1) as f64);
                let x0 = math::floor(fx) as usize;
                let x1 = (x0 + 1).min(self.cols - 1);
                let tx = fx - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bot = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out.set(r, c, top * (1.0 - ty) + bot * ty);
            }
        }
        out
    }

    /// Average-pools by an integer factor in both directions.
    pub fn pool_mean(&self, factor: usize) -> Result<Grid> {
        if factor == 0 || !self.rows.is_multiple_of(factor) || !self.cols.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(alloc::format!(
                "cannot pool {}x{} by {factor}",
                self.rows,
                self.cols
            )));
        }
        let (rows, cols) = (self.rows / factor, self.cols / factor);
        let mut out = Grid::zeros(rows, cols);
        let norm = (factor * factor) as f64;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = out.get(r / factor, c / factor) + self.get(r, c) / norm;
                out.set(r / factor, c / factor, v);
            }
        }
        Ok(out)
    }
}
