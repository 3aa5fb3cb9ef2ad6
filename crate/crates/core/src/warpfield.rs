//! Displacement fields: spatial-transformer warping, label warping, flow
//! upsampling and Jacobian-determinant folding analysis.
//!
//! Displacements are in voxel units. Channel 0 moves along x (the fastest
//! axis, `W`), channel 1 along y (`H`), channel 2 along z (`D`). Samples
//! falling outside the volume are clamped to the nearest edge voxel.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volgrid::{trilinear_resize, trilinear_resize_backward, Grid};

/// Three-component displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T = f32> {
    grid: Grid<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                actual: grid.channels(),
            });
        }
        Ok(Self { grid })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            grid: Grid::zeros(3, shape),
        }
    }

    /// Uniform displacement `(dx, dy, dz)`.
    pub fn constant(shape: [usize; 3], displacement: [T; 3]) -> Self {
        Self {
            grid: Grid::from_fn(3, shape, |c, _, _, _| displacement[c]),
        }
    }

    pub fn from_fn(shape: [usize; 3], f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        Self {
            grid: Grid::from_fn(3, shape, f),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut Grid<T> {
        &mut self.grid
    }

    pub fn into_grid(self) -> Grid<T> {
        self.grid
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            grid: self.grid.cast(),
        }
    }

    /// Largest absolute displacement component.
    pub fn max_abs(&self) -> T {
        self.grid
            .data()
            .iter()
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Integer label volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u32>,
    num_labels: u32,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u32>, num_labels: u32) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                channels: 1,
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(&label) = data.iter().find(|&&l| l >= num_labels) {
            return Err(Error::LabelOutOfRange { label, num_labels });
        }
        Ok(Self {
            shape,
            data,
            num_labels,
        })
    }

    /// Vocabulary size inferred as `max label + 1`.
    pub fn from_labels(shape: [usize; 3], data: Vec<u32>) -> Result<Self> {
        let num_labels = data.iter().copied().max().map_or(1, |m| m + 1);
        Self::new(shape, data, num_labels)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn num_labels(&self) -> u32 {
        self.num_labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u32 {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Widens the vocabulary (labels unchanged).
    pub fn with_num_labels(mut self, num_labels: u32) -> Result<Self> {
        if num_labels < self.num_labels && self.data.iter().any(|&l| l >= num_labels) {
            let label = *self.data.iter().max().unwrap();
            return Err(Error::LabelOutOfRange { label, num_labels });
        }
        self.num_labels = num_labels;
        Ok(self)
    }

    /// One channel per label, 1 where the voxel carries that label.
    pub fn one_hot<T: Real>(&self) -> Grid<T> {
        let n = self.data.len();
        let mut grid = Grid::zeros(self.num_labels as usize, self.shape);
        for (v, &l) in self.data.iter().enumerate() {
            grid.data_mut()[l as usize * n + v] = T::one();
        }
        grid
    }

    /// Copy of the `size` block at `origin`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if (0..3).any(|i| origin[i] + size[i] > self.shape[i]) {
            return Err(Error::PatchOutOfBounds {
                origin,
                size,
                shape: self.shape,
            });
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                for x in 0..size[2] {
                    data.push(self.get(origin[0] + z, origin[1] + y, origin[2] + x));
                }
            }
        }
        Self::new(size, data, self.num_labels)
    }
}

/// Interpolation taps along one axis for a sample position.
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// d(clamped position)/d(position): 0 when the sample is clamped.
    slope: T,
}

#[inline]
fn tap<T: Real>(pos: T, size: usize) -> Tap<T> {
    let max = T::from_usize(size - 1).unwrap();
    let inside = pos >= T::zero() && pos <= max;
    let c = pos.max(T::zero()).min(max);
    let lo = c.floor().to_usize().unwrap().min(size - 1);
    Tap {
        lo,
        hi: (lo + 1).min(size - 1),
        frac: c - T::from_usize(lo).unwrap(),
        slope: if inside { T::one() } else { T::zero() },
    }
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    a + f * (b - a)
}

fn check_region(volume: [usize; 3], flow: [usize; 3], origin: [usize; 3]) -> Result<()> {
    if (0..3).any(|i| origin[i] + flow[i] > volume[i]) {
        return Err(Error::PatchOutOfBounds {
            origin,
            size: flow,
            shape: volume,
        });
    }
    Ok(())
}

/// Trilinear spatial transformer: `out(p) = volume(p + flow(p))`.
pub fn warp_trilinear<T: Real>(volume: &Grid<T>, flow: &FlowField<T>) -> Result<Grid<T>> {
    volume.ensure_same_shape(flow.shape())?;
    warp_trilinear_region(volume, flow, [0, 0, 0])
}

/// Warps the sub-block of `volume` whose corner is `origin`; `flow` covers the
/// block, sample positions are `origin + p + flow(p)` in the full volume.
pub fn warp_trilinear_region<T: Real>(
    volume: &Grid<T>,
    flow: &FlowField<T>,
    origin: [usize; 3],
) -> Result<Grid<T>> {
    let vshape = volume.shape();
    let fshape = flow.shape();
    check_region(vshape, fshape, origin)?;
    let [d, h, w] = vshape;
    let n_out = fshape.iter().product::<usize>();
    let n_in = volume.voxels();
    let mut out = Grid::zeros(volume.channels(), fshape);
    let fd = flow.grid().data();
    let vd = volume.data();
    let mut v = 0;
    for z in 0..fshape[0] {
        for y in 0..fshape[1] {
            for x in 0..fshape[2] {
                let px = T::from_usize(origin[2] + x).unwrap() + fd[v];
                let py = T::from_usize(origin[1] + y).unwrap() + fd[n_out + v];
                let pz = T::from_usize(origin[0] + z).unwrap() + fd[2 * n_out + v];
                let (tx, ty, tz) = (tap(px, w), tap(py, h), tap(pz, d));
                let i00 = (tz.lo * h + ty.lo) * w;
                let i01 = (tz.lo * h + ty.hi) * w;
                let i10 = (tz.hi * h + ty.lo) * w;
                let i11 = (tz.hi * h + ty.hi) * w;
                for c in 0..volume.channels() {
                    let s = &vd[c * n_in..(c + 1) * n_in];
                    let a = lerp(s[i00 + tx.lo], s[i00 + tx.hi], tx.frac);
                    let b = lerp(s[i01 + tx.lo], s[i01 + tx.hi], tx.frac);
                    let e = lerp(s[i10 + tx.lo], s[i10 + tx.hi], tx.frac);
                    let f = lerp(s[i11 + tx.lo], s[i11 + tx.hi], tx.frac);
                    out.data_mut()[c * n_out + v] = lerp(lerp(a, b, ty.frac), lerp(e, f, ty.frac), tz.frac);
                }
                v += 1;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp_trilinear_region`] w.r.t. the volume and the flow.
pub struct WarpGrads<T> {
    pub volume: Grid<T>,
    pub flow: FlowField<T>,
}

/// Adjoint of [`warp_trilinear_region`]. Set `want_volume` to false to skip
/// the scatter into the volume gradient (it is then all zeros).
pub fn warp_trilinear_backward<T: Real>(
    volume: &Grid<T>,
    flow: &FlowField<T>,
    origin: [usize; 3],
    grad_out: &Grid<T>,
    want_volume: bool,
) -> Result<WarpGrads<T>> {
    let vshape = volume.shape();
    let fshape = flow.shape();
    check_region(vshape, fshape, origin)?;
    grad_out.ensure_same_shape(fshape)?;
    if grad_out.channels() != volume.channels() {
        return Err(Error::ChannelMismatch {
            expected: volume.channels(),
            actual: grad_out.channels(),
        });
    }
    let [d, h, w] = vshape;
    let n_out = fshape.iter().product::<usize>();
    let n_in = volume.voxels();
    let mut gvol = Grid::zeros(volume.channels(), vshape);
    let mut gflow = Grid::zeros(3, fshape);
    let fd = flow.grid().data();
    let vd = volume.data();
    let gd = grad_out.data();
    let one = T::one();
    let mut v = 0;
    for z in 0..fshape[0] {
        for y in 0..fshape[1] {
            for x in 0..fshape[2] {
                let px = T::from_usize(origin[2] + x).unwrap() + fd[v];
                let py = T::from_usize(origin[1] + y).unwrap() + fd[n_out + v];
                let pz = T::from_usize(origin[0] + z).unwrap() + fd[2 * n_out + v];
                let (tx, ty, tz) = (tap(px, w), tap(py, h), tap(pz, d));
                let i00 = (tz.lo * h + ty.lo) * w;
                let i01 = (tz.lo * h + ty.hi) * w;
                let i10 = (tz.hi * h + ty.lo) * w;
                let i11 = (tz.hi * h + ty.hi) * w;
                let (wx0, wx1) = (one - tx.frac, tx.frac);
                let (wy0, wy1) = (one - ty.frac, ty.frac);
                let (wz0, wz1) = (one - tz.frac, tz.frac);
                let (mut gx, mut gy, mut gz) = (T::zero(), T::zero(), T::zero());
                for c in 0..volume.channels() {
                    let g = gd[c * n_out + v];
                    if g == T::zero() {
                        continue;
                    }
                    let s = &vd[c * n_in..(c + 1) * n_in];
                    let c000 = s[i00 + tx.lo];
                    let c001 = s[i00 + tx.hi];
                    let c010 = s[i01 + tx.lo];
                    let c011 = s[i01 + tx.hi];
                    let c100 = s[i10 + tx.lo];
                    let c101 = s[i10 + tx.hi];
                    let c110 = s[i11 + tx.lo];
                    let c111 = s[i11 + tx.hi];
                    let dx = wz0 * (wy0 * (c001 - c000) + wy1 * (c011 - c010))
                        + wz1 * (wy0 * (c101 - c100) + wy1 * (c111 - c110));
                    let dy = wz0 * (wx0 * (c010 - c000) + wx1 * (c011 - c001))
                        + wz1 * (wx0 * (c110 - c100) + wx1 * (c111 - c101));
                    let dz = wy0 * (wx0 * (c100 - c000) + wx1 * (c101 - c001))
                        + wy1 * (wx0 * (c110 - c010) + wx1 * (c111 - c011));
                    gx += g * dx;
                    gy += g * dy;
                    gz += g * dz;
                    if want_volume {
                        let gv = &mut gvol.data_mut()[c * n_in..(c + 1) * n_in];
                        gv[i00 + tx.lo] += g * wz0 * wy0 * wx0;
                        gv[i00 + tx.hi] += g * wz0 * wy0 * wx1;
                        gv[i01 + tx.lo] += g * wz0 * wy1 * wx0;
                        gv[i01 + tx.hi] += g * wz0 * wy1 * wx1;
                        gv[i10 + tx.lo] += g * wz1 * wy0 * wx0;
                        gv[i10 + tx.hi] += g * wz1 * wy0 * wx1;
                        gv[i11 + tx.lo] += g * wz1 * wy1 * wx0;
                        gv[i11 + tx.hi] += g * wz1 * wy1 * wx1;
                    }
                }
                let gf = gflow.data_mut();
                gf[v] = gx * tx.slope;
                gf[n_out + v] = gy * ty.slope;
                gf[2 * n_out + v] = gz * tz.slope;
                v += 1;
            }
        }
    }
    Ok(WarpGrads {
        volume: gvol,
        flow: FlowField { grid: gflow },
    })
}

/// Nearest-neighbour label warp (evaluation only).
pub fn warp_nearest<T: Real>(labels: &LabelMap, flow: &FlowField<T>) -> Result<LabelMap> {
    let shape = labels.shape();
    if shape != flow.shape() {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: flow.shape(),
        });
    }
    let n = labels.data.len();
    let fd = flow.grid().data();
    let round = |p: T, size: usize| -> usize {
        let r = p.round();
        if r <= T::zero() {
            0
        } else {
            r.to_usize().unwrap_or(usize::MAX).min(size - 1)
        }
    };
    let mut out = Vec::with_capacity(n);
    let mut v = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let sx = round(T::from_usize(x).unwrap() + fd[v], shape[2]);
                let sy = round(T::from_usize(y).unwrap() + fd[n + v], shape[1]);
                let sz = round(T::from_usize(z).unwrap() + fd[2 * n + v], shape[0]);
                out.push(labels.get(sz, sy, sx));
                v += 1;
            }
        }
    }
    LabelMap::new(shape, out, labels.num_labels)
}

/// Resizes each component by `factor` and rescales the displacements.
pub fn upsample_flow<T: Real>(flow: &FlowField<T>, factor: usize) -> FlowField<T> {
    let s = flow.shape();
    let mut grid = trilinear_resize(flow.grid(), [s[0] * factor, s[1] * factor, s[2] * factor]);
    grid.scale(T::from_usize(factor).unwrap());
    FlowField { grid }
}

pub fn upsample_flow_backward<T: Real>(grad: &FlowField<T>, factor: usize) -> FlowField<T> {
    let s = grad.shape();
    let mut scaled = grad.grid().clone();
    scaled.scale(T::from_usize(factor).unwrap());
    FlowField {
        grid: trilinear_resize_backward(&scaled, [s[0] / factor, s[1] / factor, s[2] / factor]),
    }
}

/// Derivative along `axis` (0 = x, 1 = y, 2 = z) of `comp` at a voxel:
/// central differences inside, one-sided on faces.
fn partial(data: &[f64], shape: [usize; 3], comp: usize, axis: usize, zyx: [usize; 3]) -> f64 {
    let n = shape.iter().product::<usize>();
    let dim = 2 - axis; // index into zyx / shape
    let size = shape[dim];
    let at = |k: usize| {
        let mut p = zyx;
        p[dim] = k;
        data[comp * n + (p[0] * shape[1] + p[1]) * shape[2] + p[2]]
    };
    let i = zyx[dim];
    if i == 0 {
        at(1) - at(0)
    } else if i == size - 1 {
        at(i) - at(i - 1)
    } else {
        (at(i + 1) - at(i - 1)) * 0.5
    }
}

/// `det(I + grad u)` at every voxel.
pub fn jacobian_det_map<T: Real>(flow: &FlowField<T>) -> Result<Grid<T>> {
    let shape = flow.shape();
    if shape.iter().any(|&s| s < 2) {
        return Err(Error::DegenerateVolume(shape));
    }
    let data: Vec<f64> = flow.grid().data().iter().map(|v| v.as_f64()).collect();
    Ok(Grid::from_fn(1, shape, |_, z, y, x| {
        let mut j = [[0.0f64; 3]; 3];
        for (comp, row) in j.iter_mut().enumerate() {
            for (axis, e) in row.iter_mut().enumerate() {
                *e = partial(&data, shape, comp, axis, [z, y, x]) + if comp == axis { 1.0 } else { 0.0 };
            }
        }
        T::from_f64_lossy(det3(&j))
    }))
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Number of voxels whose Jacobian determinant is `<= 0` (folding).
pub fn count_nonpositive_jacobian<T: Real>(flow: &FlowField<T>) -> Result<usize> {
    Ok(jacobian_det_map(flow)?
        .data()
        .iter()
        .filter(|&&d| d <= T::zero())
        .count())
}
