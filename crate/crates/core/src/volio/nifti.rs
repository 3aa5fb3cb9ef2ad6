//! Minimal uncompressed single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supported: 3D scalar volumes (uint8, int16, int32, float32, float64) and
//! displacement fields stored as 5D vector volumes (`dim = [5, X, Y, Z, 1, 3]`,
//! `intent_code = 1007`), either byte order on read, little-endian on write.
//! Spatial axes map as NIfTI `i, j, k` = grid `x, y, z`; flow components are
//! `(dx, dy, dz)` in voxel units.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{Geometry, Volume};
use crate::error::{Error, Result};
use crate::volgrid::Grid;
use crate::warpfield::{FlowField, LabelMap};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte empty extension block.
pub const DATA_OFFSET: usize = 352;
pub const INTENT_VECTOR: i16 = 1007;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// Decoded file contents before interpretation as image, labels, or flow.
#[derive(Clone, Debug)]
pub struct RawNifti {
    /// `dim[1..=dim[0]]`.
    pub dims: Vec<usize>,
    pub datatype: Datatype,
    pub intent_code: i16,
    pub geometry: Geometry,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// Stored values in file order (x fastest).
    pub values: Vec<f64>,
}

impl RawNifti {
    fn spatial_shape(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    fn check_scalar(&self) -> Result<[usize; 3]> {
        if self.dims.len() > 3 && self.dims[3..].iter().any(|&d| d != 1) {
            return Err(Error::UnsupportedDim(self.dim_field()));
        }
        Ok(self.spatial_shape())
    }

    fn dim_field(&self) -> [i16; 8] {
        let mut d = [0i16; 8];
        d[0] = self.dims.len() as i16;
        for (i, &v) in self.dims.iter().enumerate() {
            d[i + 1] = v as i16;
        }
        d
    }
}

fn quaternion_affine(b: f64, c: f64, d: f64, offset: [f64; 3], pixdim: [f64; 4]) -> [[f64; 4]; 4] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [pixdim[1], pixdim[2], pixdim[3] * qfac];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
        m[i][3] = offset[i];
    }
    m[3][3] = 1.0;
    m
}

fn decode_with<B: ByteOrder>(bytes: &[u8]) -> Result<RawNifti> {
    let h = &bytes[..HEADER_SIZE];
    let magic: [u8; 4] = h[344..348].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(Error::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&h[40 + 2 * i..]);
    }
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(Error::UnsupportedDim(dim));
    }
    let dims: Vec<usize> = dim[1..=ndim as usize].iter().map(|&d| d as usize).collect();
    let datatype = Datatype::from_code(B::read_i16(&h[70..]))?;
    let f32_at = |o: usize| B::read_f32(&h[o..]) as f64;
    let pixdim = [f32_at(76), f32_at(80), f32_at(84), f32_at(88)];
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f64) || vox_offset.fract() != 0.0 {
        return Err(Error::BadHeader(format!("vox_offset {vox_offset}")));
    }
    let qform_code = B::read_i16(&h[252..]);
    let sform_code = B::read_i16(&h[254..]);
    let affine = if sform_code > 0 {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        m[3][3] = 1.0;
        m
    } else if qform_code > 0 {
        quaternion_affine(
            f32_at(256),
            f32_at(260),
            f32_at(264),
            [f32_at(268), f32_at(272), f32_at(276)],
            pixdim,
        )
    } else {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][i] = pixdim[i + 1];
        }
        m[3][3] = 1.0;
        m
    };
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::BadHeader(format!("non-positive pixdim {spacing:?}")));
    }

    let count: usize = dims.iter().product();
    let start = vox_offset as usize;
    let needed = start + count * datatype.bytes();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let payload = &bytes[start..needed];
    let values: Vec<f64> = match datatype {
        Datatype::U8 => payload.iter().map(|&v| v as f64).collect(),
        Datatype::I16 => payload.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        Datatype::I32 => payload.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        Datatype::F32 => payload.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        Datatype::F64 => payload.chunks_exact(8).map(B::read_f64).collect(),
    };
    Ok(RawNifti {
        dims,
        datatype,
        intent_code: B::read_i16(&h[68..]),
        geometry: Geometry { spacing, affine },
        scl_slope: B::read_f32(&h[112..]),
        scl_inter: B::read_f32(&h[116..]),
        values,
    })
}

/// Parses an in-memory `.nii` file; byte order is detected from `sizeof_hdr`.
pub fn decode(bytes: &[u8]) -> Result<RawNifti> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            needed: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err(Error::BadHeader(format!(
            "sizeof_hdr is {} in either byte order",
            LittleEndian::read_i32(bytes)
        )))
    }
}

/// Serialises `values` (file order) with the given header fields.
pub fn encode(dims: &[usize], datatype: Datatype, intent_code: i16, geometry: &Geometry, values: &[f64]) -> Vec<u8> {
    assert!((1..=7).contains(&dims.len()));
    assert_eq!(dims.iter().product::<usize>(), values.len());
    let mut out = vec![0u8; DATA_OFFSET + values.len() * datatype.bytes()];
    let h = &mut out[..HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    LittleEndian::write_i16(&mut h[40..], dims.len() as i16);
    for (i, &d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[42 + 2 * i..], d as i16);
    }
    for i in dims.len()..7 {
        LittleEndian::write_i16(&mut h[42 + 2 * i..], 1);
    }
    LittleEndian::write_i16(&mut h[68..], intent_code);
    LittleEndian::write_i16(&mut h[70..], datatype.code());
    LittleEndian::write_i16(&mut h[72..], (datatype.bytes() * 8) as i16);
    let pixdim = [1.0, geometry.spacing[0], geometry.spacing[1], geometry.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, &p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    // xyzt_units: millimetres.
    h[123] = 2;
    LittleEndian::write_i16(&mut h[254..], 1);
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], geometry.affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let payload = &mut out[DATA_OFFSET..];
    match datatype {
        Datatype::U8 => payload.iter_mut().zip(values).for_each(|(b, &v)| *b = v as u8),
        Datatype::I16 => payload
            .chunks_exact_mut(2)
            .zip(values)
            .for_each(|(c, &v)| LittleEndian::write_i16(c, v as i16)),
        Datatype::I32 => payload
            .chunks_exact_mut(4)
            .zip(values)
            .for_each(|(c, &v)| LittleEndian::write_i32(c, v as i32)),
        Datatype::F32 => payload
            .chunks_exact_mut(4)
            .zip(values)
            .for_each(|(c, &v)| LittleEndian::write_f32(c, v as f32)),
        Datatype::F64 => payload
            .chunks_exact_mut(8)
            .zip(values)
            .for_each(|(c, &v)| LittleEndian::write_f64(c, v)),
    }
    out
}

fn read_raw(path: &Path) -> Result<RawNifti> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Intensity volume (scaled by `scl_slope`/`scl_inter` when set).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    raw_to_volume(read_raw(path.as_ref())?)
}

pub fn raw_to_volume(raw: RawNifti) -> Result<Volume> {
    let shape = raw.check_scalar()?;
    let (slope, inter) = (raw.scl_slope as f64, raw.scl_inter as f64);
    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let data = raw
        .values
        .iter()
        .map(|&v| if scaled { (v * slope + inter) as f32 } else { v as f32 })
        .collect();
    Ok(Volume {
        grid: Grid::new(1, shape, data)?,
        geometry: raw.geometry,
    })
}

/// Segmentation volume; values must be non-negative integers.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(LabelMap, Geometry)> {
    let raw = read_raw(path.as_ref())?;
    let shape = raw.check_scalar()?;
    let mut data = Vec::with_capacity(raw.values.len());
    for &v in &raw.values {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
            return Err(Error::BadHeader(format!("label value {v} is not a non-negative integer")));
        }
        data.push(v as u32);
    }
    Ok((LabelMap::from_labels(shape, data)?, raw.geometry))
}

/// Displacement field written by [`write_flow`].
pub fn read_flow(path: impl AsRef<Path>) -> Result<(FlowField, Geometry)> {
    let raw = read_raw(path.as_ref())?;
    if raw.dims.len() != 5 || raw.dims[3] != 1 || raw.dims[4] != 3 {
        return Err(Error::UnsupportedDim(raw.dim_field()));
    }
    let shape = raw.spatial_shape();
    let data = raw.values.iter().map(|&v| v as f32).collect();
    Ok((FlowField::new(Grid::new(3, shape, data)?)?, raw.geometry))
}

fn grid_dims(shape: [usize; 3]) -> [usize; 3] {
    [shape[2], shape[1], shape[0]]
}

/// Writes a single-channel float32 volume.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if volume.grid.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: volume.grid.channels(),
        });
    }
    let values: Vec<f64> = volume.grid.data().iter().map(|&v| v as f64).collect();
    let bytes = encode(&grid_dims(volume.grid.shape()), Datatype::F32, 0, &volume.geometry, &values);
    write_bytes(path.as_ref(), &bytes)
}

/// Writes labels as uint8 when the vocabulary fits, else int16 or int32.
pub fn write_labels(labels: &LabelMap, geometry: &Geometry, path: impl AsRef<Path>) -> Result<()> {
    let datatype = match labels.num_labels() {
        0..=256 => Datatype::U8,
        257..=32768 => Datatype::I16,
        _ => Datatype::I32,
    };
    let values: Vec<f64> = labels.data().iter().map(|&v| v as f64).collect();
    let bytes = encode(&grid_dims(labels.shape()), datatype, 0, geometry, &values);
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a flow as a float32 vector volume (`dim[5] = 3`, vector intent).
pub fn write_flow(flow: &FlowField, geometry: &Geometry, path: impl AsRef<Path>) -> Result<()> {
    let [x, y, z] = grid_dims(flow.shape());
    let values: Vec<f64> = flow.grid().data().iter().map(|&v| v as f64).collect();
    let bytes = encode(&[x, y, z, 1, 3], Datatype::F32, INTENT_VECTOR, geometry, &values);
    write_bytes(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_volume_file_size() {
        let bytes = encode(&[8, 8, 8], Datatype::F32, 0, &Geometry::default(), &vec![0.0; 512]);
        assert_eq!(bytes.len(), 352 + 8 * 8 * 8 * 4);
    }

    #[test]
    fn every_datatype_round_trips() {
        let values: Vec<f64> = (0..24).map(|v| v as f64).collect();
        for dt in [Datatype::U8, Datatype::I16, Datatype::I32, Datatype::F32, Datatype::F64] {
            let raw = decode(&encode(&[4, 3, 2], dt, 0, &Geometry::default(), &values)).unwrap();
            assert_eq!(raw.datatype, dt);
            assert_eq!(raw.values, values);
            assert_eq!(raw.dims, vec![4, 3, 2]);
        }
    }

    #[test]
    fn validation_errors_are_distinct() {
        let good = encode(&[2, 2, 2], Datatype::F32, 0, &Geometry::default(), &[0.0; 8]);
        let mut bad = good.clone();
        bad[344] = b'x';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[70..], 128);
        assert!(matches!(decode(&bad), Err(Error::UnsupportedDatatype(128))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&good[..100]), Err(Error::Truncated { .. })));
        let four_d = encode(&[2, 2, 2, 2], Datatype::F32, 0, &Geometry::default(), &[0.0; 16]);
        assert!(matches!(raw_to_volume(decode(&four_d).unwrap()), Err(Error::UnsupportedDim(_))));
        let mut bad = good;
        LittleEndian::write_i32(&mut bad[0..], 540);
        assert!(matches!(decode(&bad), Err(Error::BadHeader(_))));
    }

    #[test]
    fn quaternion_identity_matches_pixdim() {
        let m = quaternion_affine(0.0, 0.0, 0.0, [1.0, 2.0, 3.0], [1.0, 0.5, 2.0, 3.0]);
        assert_eq!(m[0], [0.5, 0.0, 0.0, 1.0]);
        assert_eq!(m[1], [0.0, 2.0, 0.0, 2.0]);
        assert_eq!(m[2], [0.0, 0.0, 3.0, 3.0]);
        // 180 degrees about z: b = c = 0, d = 1.
        let r = quaternion_affine(0.0, 0.0, 1.0, [0.0; 3], [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(r[0][0], -1.0);
        assert_eq!(r[1][1], -1.0);
        assert_eq!(r[2][2], 1.0);
    }
}
