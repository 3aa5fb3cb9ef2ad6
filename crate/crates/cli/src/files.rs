//! Output guards, input loading and the pad/crop policy.

use std::fs;
use std::path::{Path, PathBuf};

use ncamorph::engine::ArchConfig;
use ncamorph::optim::TrainPair;
use ncamorph::volio::{normalize, read_nifti, PairDataset, Volume};
use ncamorph::warpfield::FlowField;
use ncamorph::Grid;

use crate::error::{CliError, Result};

/// Refuses to clobber an existing file unless `force` is set.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    guard(path, force)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Reads an intensity volume and rescales it to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Volume> {
    Ok(normalize(&read_nifti(path)?)?)
}

pub fn load_dataset(manifest: &Path) -> Result<PairDataset> {
    let data = PairDataset::from_manifest(manifest)?;
    if data.is_empty() {
        return Err(ncamorph::Error::EmptyDataset.into());
    }
    Ok(data)
}

/// Every pair of the manifest, normalized, ready for training.
pub fn load_train_pairs(data: &PairDataset) -> Result<Vec<TrainPair>> {
    (0..data.len())
        .map(|i| {
            let p = data.load(i)?;
            let segs = match (p.fixed_seg, p.moving_seg) {
                (Some(f), Some(m)) => Some((f, m)),
                _ => None,
            };
            Ok(TrainPair {
                fixed: normalize(&p.fixed)?.grid,
                moving: normalize(&p.moving)?.grid,
                segs,
            })
        })
        .collect()
}

/// Smallest shape at least `shape` whose sides are multiples of what the
/// pyramid needs.
pub fn padded_shape(shape: [usize; 3], arch: &ArchConfig) -> [usize; 3] {
    let m = arch.size_multiple();
    shape.map(|s| s.div_ceil(m) * m)
}

/// Zero-pads at the high end of each axis.
pub fn pad(grid: &Grid<f32>, shape: [usize; 3]) -> Grid<f32> {
    if grid.shape() == shape {
        return grid.clone();
    }
    let [d, h, w] = grid.shape();
    Grid::from_fn(grid.channels(), shape, |c, z, y, x| {
        if z < d && y < h && x < w {
            grid.get(c, z, y, x)
        } else {
            0.0
        }
    })
}

/// Inverse of [`pad`] for flows.
pub fn crop_flow(flow: FlowField, shape: [usize; 3]) -> Result<FlowField> {
    if flow.shape() == shape {
        return Ok(flow);
    }
    let g = flow.grid();
    Ok(FlowField::new(Grid::from_fn(3, shape, |c, z, y, x| g.get(c, z, y, x)))?)
}

/// `base` with `suffix` inserted before the extension: `a/flow.nii` and
/// `fr0.5` give `a/flow.fr0.5.nii`.
pub fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{suffix}.{ext}"),
        None => format!("{stem}.{suffix}"),
    };
    base.with_file_name(name)
}
