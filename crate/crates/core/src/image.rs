//! Dense raster containers shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height x width` raster of scalar cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Per-pixel boolean validity.
pub type MaskMap = Grid<bool>;

/// Reciprocal of metric depth, one value per pixel.
pub type InverseDepthMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
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
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn zip_map<U, V>(&self, other: &Grid<U>, mut f: impl FnMut(&T, &U) -> V) -> Grid<V> {
        assert!(self.same_shape(other), "zip_map on grids of different shape");
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(a, b))
                .collect(),
        }
    }
}

impl MaskMap {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction_true(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_true() as f64 / self.data.len() as f64
        }
    }
}

impl Grid<f64> {
    /// 2x2 box-average downsampling; dimensions must be even.
    pub fn downsample2(&self) -> Result<Self> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::BadShape(format!(
                "{}x{} is not divisible by 2",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / 2, self.height / 2);
        Ok(Grid::from_fn(w, h, |x, y| {
            let (sx, sy) = (2 * x, 2 * y);
            0.25 * (self.get(sx, sy)
                + self.get(sx + 1, sy)
                + self.get(sx, sy + 1)
                + self.get(sx + 1, sy + 1))
        }))
    }

    /// Nearest-neighbour 2x upsampling; the exact right inverse of [`Grid::downsample2`].
    pub fn upsample2(&self) -> Self {
        Grid::from_fn(self.width * 2, self.height * 2, |x, y| {
            *self.get(x / 2, y / 2)
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// `height x width x channels` intensities, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::BadShape("image needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        ImageBuffer {
            width,
            height,
            channels,
            data,
        }
    }

    /// Single-channel image from a grid.
    pub fn from_grid(grid: &Grid<f64>) -> Self {
        ImageBuffer {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            data: grid.as_slice().to_vec(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn channel(&self, c: usize) -> Grid<f64> {
        Grid::from_fn(self.width, self.height, |x, y| self.get(x, y, c))
    }

    /// Channel mean as a grid.
    pub fn to_gray(&self) -> Grid<f64> {
        let inv = 1.0 / self.channels as f64;
        Grid::from_fn(self.width, self.height, |x, y| {
            self.pixel(x, y).iter().sum::<f64>() * inv
        })
    }

    /// 2x2 box-average downsampling; dimensions must be even.
    pub fn downsample2(&self) -> Result<Self> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::BadShape(format!(
                "{}x{} is not divisible by 2",
                self.width, self.height
            )));
        }
        Ok(ImageBuffer::from_fn(
            self.width / 2,
            self.height / 2,
            self.channels,
            |x, y, c| {
                let (sx, sy) = (2 * x, 2 * y);
                0.25 * (self.get(sx, sy, c)
                    + self.get(sx + 1, sy, c)
                    + self.get(sx, sy + 1, c)
                    + self.get(sx + 1, sy + 1, c))
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_wrong_length() {
        assert!(Grid::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn upsample_then_downsample_is_identity() {
        let g = Grid::from_fn(3, 2, |x, y| (x * 7 + y) as f64 * 0.13);
        assert_eq!(g.upsample2().downsample2().unwrap(), g);
    }

    #[test]
    fn image_downsample_rejects_odd() {
        let img = ImageBuffer::filled(3, 2, 1, 0.5);
        assert!(matches!(img.downsample2(), Err(Error::BadShape(_))));
    }
}
