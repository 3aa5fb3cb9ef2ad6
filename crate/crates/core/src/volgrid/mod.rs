//! Dense multi-channel 3D grids and the differentiable primitives the
//! cellular automaton is assembled from.
//!
//! Every forward primitive has a matching `*_backward` function that maps an
//! upstream gradient (shaped like the forward output) to gradients of the
//! forward inputs. Layout is channel-major, then z, y, x (x fastest).

mod conv;
mod gradcheck;
mod ops;

pub use conv::{conv3d, conv3d_backward, ConvGrads, ConvKernel3D};
pub(crate) use conv::{im2col_chunk, voxel_chunk};
pub use gradcheck::{
    adjoint_mismatch, central_difference_jvp, grad_check, GradCheckOptions, GradCheckReport,
};
pub use ops::{
    avg_downsample, avg_downsample_backward, concat_backward, concat_channels, crop_patch,
    crop_patch_backward, dense, dense_backward, dense_grid, dense_grid_backward, embed_patch,
    relu, relu_backward, relu_slice, relu_slice_backward, trilinear_resize,
    trilinear_resize_backward, DenseGrads, DensePair,
};

use crate::error::{Error, Result};
use crate::real::Real;

/// `C x D x H x W` grid of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    channels: usize,
    shape: [usize; 3],
    data: Vec<T>,
}

/// Single-precision grid used on the production path.
pub type ChannelGrid = Grid<f32>;

impl<T: Real> Grid<T> {
    pub fn new(channels: usize, shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let expected = channels * shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                channels,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            shape,
            data,
        })
    }

    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self::filled(channels, shape, T::zero())
    }

    pub fn filled(channels: usize, shape: [usize; 3], value: T) -> Self {
        let len = channels * shape.iter().product::<usize>();
        Self {
            channels,
            shape,
            data: vec![value; len],
        }
    }

    /// Builds a grid by evaluating `f(c, z, y, x)` at every element.
    pub fn from_fn(
        channels: usize,
        shape: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let [d, h, w] = shape;
        let mut data = Vec::with_capacity(channels * d * h * w);
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(c, z, y, x));
                    }
                }
            }
        }
        Self {
            channels,
            shape,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [d, h, w] = self.shape;
        ((c * d + z) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, value: T) {
        let i = self.index(c, z, y, x);
        self.data[i] = value;
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            channels: self.channels,
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `start..end`.
    pub fn select_channels(&self, start: usize, end: usize) -> Self {
        let n = self.voxels();
        Self {
            channels: end - start,
            shape: self.shape,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_layout(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub(crate) fn ensure_same_shape(&self, other_shape: [usize; 3]) -> Result<()> {
        if self.shape != other_shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other_shape,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other.shape)?;
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                actual: other.channels,
            });
        }
        Ok(())
    }
}

/// Flat voxel index to `(z, y, x)`.
#[inline]
pub(crate) fn unflatten(v: usize, shape: [usize; 3]) -> (usize, usize, usize) {
    let hw = shape[1] * shape[2];
    (v / hw, (v % hw) / shape[2], v % shape[2])
}
