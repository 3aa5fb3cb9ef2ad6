use super::Grid;
use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};

/// Fully connected layer, weights row-major `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePair<T> {
    out_dim: usize,
    in_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DensePair<T> {
    pub fn new(out_dim: usize, in_dim: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != out_dim * in_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim * in_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                actual: bias.len(),
            });
        }
        Ok(Self {
            out_dim,
            in_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weights: vec![T::zero(); out_dim * in_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> DensePair<U> {
        DensePair {
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            weights: self.weights.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseGrads<I, T> {
    pub input: I,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense<T: Real>(input: &[T], layer: &DensePair<T>) -> Result<Vec<T>> {
    if input.len() != layer.in_dim {
        return Err(Error::DimensionMismatch {
            expected: layer.in_dim,
            actual: input.len(),
        });
    }
    Ok((0..layer.out_dim)
        .map(|i| {
            let row = &layer.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
            row.iter().zip(input).map(|(&w, &x)| w * x).sum::<T>() + layer.bias[i]
        })
        .collect())
}

pub fn dense_backward<T: Real>(
    input: &[T],
    layer: &DensePair<T>,
    grad_out: &[T],
) -> Result<DenseGrads<Vec<T>, T>> {
    if input.len() != layer.in_dim || grad_out.len() != layer.out_dim {
        return Err(Error::DimensionMismatch {
            expected: layer.in_dim,
            actual: input.len(),
        });
    }
    let mut grad_in = vec![T::zero(); layer.in_dim];
    let mut weights = vec![T::zero(); layer.weights.len()];
    for (i, &g) in grad_out.iter().enumerate() {
        let row = &layer.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
        for j in 0..layer.in_dim {
            grad_in[j] += row[j] * g;
            weights[i * layer.in_dim + j] = g * input[j];
        }
    }
    Ok(DenseGrads {
        input: grad_in,
        weights,
        bias: grad_out.to_vec(),
    })
}

/// Applies the dense layer independently at every voxel (channels are the
/// feature vector).
pub fn dense_grid<T: Real>(input: &Grid<T>, layer: &DensePair<T>) -> Result<Grid<T>> {
    if input.channels() != layer.in_dim {
        return Err(Error::ChannelMismatch {
            expected: layer.in_dim,
            actual: input.channels(),
        });
    }
    let n = input.voxels();
    let mut out = Grid::zeros(layer.out_dim, input.shape());
    for o in 0..layer.out_dim {
        out.channel_mut(o).fill(layer.bias[o]);
    }
    gemm(
        layer.out_dim,
        layer.in_dim,
        n,
        T::one(),
        MatRef::rows(&layer.weights, layer.in_dim),
        MatRef::rows(input.data(), n),
        T::one(),
        out.data_mut(),
        n,
        1,
    );
    Ok(out)
}

pub fn dense_grid_backward<T: Real>(
    input: &Grid<T>,
    layer: &DensePair<T>,
    grad_out: &Grid<T>,
) -> Result<DenseGrads<Grid<T>, T>> {
    if input.channels() != layer.in_dim {
        return Err(Error::ChannelMismatch {
            expected: layer.in_dim,
            actual: input.channels(),
        });
    }
    if grad_out.channels() != layer.out_dim {
        return Err(Error::ChannelMismatch {
            expected: layer.out_dim,
            actual: grad_out.channels(),
        });
    }
    input.ensure_same_shape(grad_out.shape())?;
    let n = input.voxels();
    let mut grad_in = Grid::zeros(layer.in_dim, input.shape());
    gemm(
        layer.in_dim,
        layer.out_dim,
        n,
        T::one(),
        MatRef::rows_t(&layer.weights, layer.in_dim),
        MatRef::rows(grad_out.data(), n),
        T::zero(),
        grad_in.data_mut(),
        n,
        1,
    );
    let mut weights = vec![T::zero(); layer.weights.len()];
    gemm(
        layer.out_dim,
        n,
        layer.in_dim,
        T::one(),
        MatRef::rows(grad_out.data(), n),
        MatRef::rows_t(input.data(), n),
        T::zero(),
        &mut weights,
        layer.in_dim,
        1,
    );
    let bias = (0..layer.out_dim)
        .map(|o| grad_out.channel(o).iter().copied().sum())
        .collect();
    Ok(DenseGrads {
        input: grad_in,
        weights,
        bias,
    })
}

pub fn relu_slice<T: Real>(input: &[T]) -> Vec<T> {
    input.iter().map(|&v| v.max(T::zero())).collect()
}

/// Passes the gradient where the input is strictly positive.
pub fn relu_slice_backward<T: Real>(input: &[T], grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn relu<T: Real>(input: &Grid<T>) -> Grid<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Real>(input: &Grid<T>, grad_out: &Grid<T>) -> Result<Grid<T>> {
    input.ensure_same_layout(grad_out)?;
    Grid::new(
        input.channels(),
        input.shape(),
        relu_slice_backward(input.data(), grad_out.data()),
    )
}

/// Block mean over `factor^3` blocks.
pub fn avg_downsample<T: Real>(input: &Grid<T>, factor: usize) -> Result<Grid<T>> {
    let shape = input.shape();
    if factor == 0 || shape.iter().any(|&s| s % factor != 0) {
        return Err(Error::NotDivisible { shape, factor });
    }
    let [d, h, w] = shape;
    let out_shape = [d / factor, h / factor, w / factor];
    let count = (factor * factor * factor) as f64;
    // Block sums accumulate in f64 so constant blocks average back exactly.
    Ok(Grid::from_fn(input.channels(), out_shape, |c, z, y, x| {
        let mut acc = 0.0f64;
        for bz in 0..factor {
            for by in 0..factor {
                for bx in 0..factor {
                    acc += input
                        .get(c, z * factor + bz, y * factor + by, x * factor + bx)
                        .as_f64();
                }
            }
        }
        T::from_f64_lossy(acc / count)
    }))
}

/// Spreads each coarse gradient uniformly over its block.
pub fn avg_downsample_backward<T: Real>(grad_out: &Grid<T>, factor: usize) -> Grid<T> {
    let [d, h, w] = grad_out.shape();
    let scale = T::one() / T::from_usize(factor * factor * factor).unwrap();
    Grid::from_fn(
        grad_out.channels(),
        [d * factor, h * factor, w * factor],
        |c, z, y, x| grad_out.get(c, z / factor, y / factor, x / factor) * scale,
    )
}

struct AxisTaps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

/// Half-pixel-centre sampling positions, clamped to the source extent.
fn axis_taps<T: Real>(src: usize, dst: usize) -> AxisTaps<T> {
    let scale = src as f64 / dst as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = c.floor() as usize;
        taps.lo.push(lo);
        taps.hi.push((lo + 1).min(src - 1));
        taps.frac.push(T::from_f64_lossy(c - lo as f64));
    }
    taps
}

/// (outer, len, inner) view of `shape` for resampling along `axis` (0 = z).
fn axis_layout(channels: usize, shape: [usize; 3], axis: usize) -> (usize, usize, usize) {
    let outer = channels * shape[..axis].iter().product::<usize>();
    let inner = shape[axis + 1..].iter().product::<usize>();
    (outer, shape[axis], inner)
}

fn resize_axis<T: Real>(input: &Grid<T>, axis: usize, dst: usize) -> Grid<T> {
    let shape = input.shape();
    let (outer, src, inner) = axis_layout(input.channels(), shape, axis);
    let taps = axis_taps::<T>(src, dst);
    let mut out_shape = shape;
    out_shape[axis] = dst;
    let mut out = Grid::zeros(input.channels(), out_shape);
    let data = input.data();
    let od = out.data_mut();
    for b in 0..outer {
        for o in 0..dst {
            let (lo, hi, f) = (taps.lo[o], taps.hi[o], taps.frac[o]);
            let a_row = &data[(b * src + lo) * inner..(b * src + lo + 1) * inner];
            let b_row = &data[(b * src + hi) * inner..(b * src + hi + 1) * inner];
            let dst_row = &mut od[(b * dst + o) * inner..(b * dst + o + 1) * inner];
            for ((d, &a), &bv) in dst_row.iter_mut().zip(a_row).zip(b_row) {
                *d = a + f * (bv - a);
            }
        }
    }
    out
}

fn resize_axis_backward<T: Real>(grad_out: &Grid<T>, axis: usize, src: usize) -> Grid<T> {
    let shape = grad_out.shape();
    let (outer, dst, inner) = axis_layout(grad_out.channels(), shape, axis);
    let taps = axis_taps::<T>(src, dst);
    let mut in_shape = shape;
    in_shape[axis] = src;
    let mut grad_in = Grid::zeros(grad_out.channels(), in_shape);
    let g = grad_out.data();
    let gi = grad_in.data_mut();
    for b in 0..outer {
        for o in 0..dst {
            let (lo, hi, f) = (taps.lo[o], taps.hi[o], taps.frac[o]);
            let g_row = &g[(b * dst + o) * inner..(b * dst + o + 1) * inner];
            for (i, &gv) in g_row.iter().enumerate() {
                gi[(b * src + lo) * inner + i] += (T::one() - f) * gv;
                gi[(b * src + hi) * inner + i] += f * gv;
            }
        }
    }
    grad_in
}

/// Separable trilinear resampling with half-pixel centres and edge clamping.
pub fn trilinear_resize<T: Real>(input: &Grid<T>, target: [usize; 3]) -> Grid<T> {
    assert!(target.iter().all(|&t| t >= 1), "target dims must be positive");
    if input.shape() == target {
        return input.clone();
    }
    let x = resize_axis(input, 2, target[2]);
    let y = resize_axis(&x, 1, target[1]);
    resize_axis(&y, 0, target[0])
}

/// Adjoint of [`trilinear_resize`] back to `source` shape.
pub fn trilinear_resize_backward<T: Real>(grad_out: &Grid<T>, source: [usize; 3]) -> Grid<T> {
    if grad_out.shape() == source {
        return grad_out.clone();
    }
    let z = resize_axis_backward(grad_out, 0, source[0]);
    let y = resize_axis_backward(&z, 1, source[1]);
    resize_axis_backward(&y, 2, source[2])
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Result<Grid<T>> {
    a.ensure_same_shape(b.shape())?;
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Grid::new(a.channels() + b.channels(), a.shape(), data)
}

/// Splits a gradient of a concatenation into the parts for `a` (first
/// `a_channels`) and `b`.
pub fn concat_backward<T: Real>(grad: &Grid<T>, a_channels: usize) -> (Grid<T>, Grid<T>) {
    (
        grad.select_channels(0, a_channels),
        grad.select_channels(a_channels, grad.channels()),
    )
}

fn check_patch(shape: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<()> {
    if (0..3).any(|i| origin[i] + size[i] > shape[i]) {
        return Err(Error::PatchOutOfBounds {
            origin,
            size,
            shape,
        });
    }
    Ok(())
}

pub fn crop_patch<T: Real>(input: &Grid<T>, origin: [usize; 3], size: [usize; 3]) -> Result<Grid<T>> {
    check_patch(input.shape(), origin, size)?;
    let [oz, oy, ox] = origin;
    let mut out = Grid::zeros(input.channels(), size);
    for c in 0..input.channels() {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let src = input.index(c, oz + z, oy + y, ox);
                let dst = out.index(c, z, y, 0);
                out.data_mut()[dst..dst + size[2]]
                    .copy_from_slice(&input.data()[src..src + size[2]]);
            }
        }
    }
    Ok(out)
}

/// Adds `patch` into `target` at `origin`.
pub fn embed_patch<T: Real>(target: &mut Grid<T>, patch: &Grid<T>, origin: [usize; 3]) -> Result<()> {
    check_patch(target.shape(), origin, patch.shape())?;
    if target.channels() != patch.channels() {
        return Err(Error::ChannelMismatch {
            expected: target.channels(),
            actual: patch.channels(),
        });
    }
    let size = patch.shape();
    for c in 0..patch.channels() {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let dst = target.index(c, origin[0] + z, origin[1] + y, origin[2]);
                let src = patch.index(c, z, y, 0);
                for x in 0..size[2] {
                    let v = patch.data()[src + x];
                    target.data_mut()[dst + x] += v;
                }
            }
        }
    }
    Ok(())
}

/// Adjoint of [`crop_patch`]: the patch gradient scattered into zeros.
pub fn crop_patch_backward<T: Real>(
    grad_patch: &Grid<T>,
    full_shape: [usize; 3],
    origin: [usize; 3],
) -> Result<Grid<T>> {
    let mut out = Grid::zeros(grad_patch.channels(), full_shape);
    embed_patch(&mut out, grad_patch, origin)?;
    Ok(out)
}
