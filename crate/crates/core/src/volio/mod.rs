//! Volume I/O, intensity normalisation, pair manifests, synthetic phantoms.

mod dataset;
pub mod nifti;
mod synth;

pub use dataset::{LoadedPair, PairDataset, PairEntry};
pub use nifti::{read_flow, read_labels, read_nifti, write_flow, write_labels, write_nifti};
pub use synth::{synth_pair, SynthConfig, SynthPair};

use crate::error::{Error, Result};
use crate::volgrid::Grid;

/// Physical placement of a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    /// Voxel size in mm along `(x, y, z)`.
    pub spacing: [f64; 3],
    /// Voxel `(i, j, k, 1)` to world coordinates.
    pub affine: [[f64; 4]; 4],
}

impl Default for Geometry {
    fn default() -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (i, row) in affine.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            spacing: [1.0; 3],
            affine,
        }
    }
}

/// Scalar volume with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Single channel.
    pub grid: Grid<f32>,
    pub geometry: Geometry,
}

impl Volume {
    pub fn new(grid: Grid<f32>) -> Self {
        Self {
            grid,
            geometry: Geometry::default(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape()
    }
}

/// Min-max rescale to `[0, 1]`.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    let (lo, hi) = volume.grid.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    if !(hi > lo) {
        return Err(Error::ConstantVolume);
    }
    let range = hi - lo;
    Ok(Volume {
        grid: volume.grid.map(|v| ((v as f64 - lo) / range) as f32),
        geometry: volume.geometry.clone(),
    })
}
