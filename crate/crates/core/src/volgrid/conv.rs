use super::{unflatten, Grid};
use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};

/// Same-padded 3D convolution kernel, weights laid out `out x in x k x k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel3D<T> {
    out_c: usize,
    in_c: usize,
    k: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel3D<T> {
    pub fn new(out_c: usize, in_c: usize, k: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        let expected = out_c * in_c * k * k * k;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: weights.len(),
            });
        }
        if bias.len() != out_c {
            return Err(Error::DimensionMismatch {
                expected: out_c,
                actual: bias.len(),
            });
        }
        Ok(Self {
            out_c,
            in_c,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Result<Self> {
        Self::new(
            out_c,
            in_c,
            k,
            vec![T::zero(); out_c * in_c * k * k * k],
            vec![T::zero(); out_c],
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn side(&self) -> usize {
        self.k
    }

    /// Flat index of weight `(o, i, dz, dy, dx)`.
    pub fn weight_index(&self, o: usize, i: usize, dz: usize, dy: usize, dx: usize) -> usize {
        (((o * self.in_c + i) * self.k + dz) * self.k + dy) * self.k + dx
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ConvKernel3D<U> {
        ConvKernel3D {
            out_c: self.out_c,
            in_c: self.in_c,
            k: self.k,
            weights: self.weights.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Kernel whose convolution is the input-adjoint of this one: channels
    /// swapped, taps mirrored, bias zero.
    pub fn adjoint(&self) -> Self {
        let k = self.k;
        let k3 = k * k * k;
        let mut weights = vec![T::zero(); self.weights.len()];
        for o in 0..self.out_c {
            for i in 0..self.in_c {
                for t in 0..k3 {
                    weights[(i * self.out_c + o) * k3 + (k3 - 1 - t)] =
                        self.weights[(o * self.in_c + i) * k3 + t];
                }
            }
        }
        Self {
            out_c: self.in_c,
            in_c: self.out_c,
            k,
            weights,
            bias: vec![T::zero(); self.in_c],
        }
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Grid<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Voxels per im2col chunk for a patch matrix with `rows` rows.
pub(crate) fn voxel_chunk(rows: usize) -> usize {
    ((1usize << 21) / rows.max(1)).clamp(64, 16384)
}

/// Fills `col` (`C*k^3` rows by `end - start` columns, row-major) with the
/// zero-padded neighbourhoods of voxels `start..end`.
pub(crate) fn im2col_chunk<T: Real>(input: &Grid<T>, k: usize, start: usize, end: usize, col: &mut [T]) {
    let shape = input.shape();
    let [d, h, w] = shape;
    let n = end - start;
    let r = (k / 2) as isize;
    debug_assert_eq!(col.len(), input.channels() * k * k * k * n);

    // Runs of consecutive voxels sharing (z, y).
    let mut segments = Vec::new();
    let mut v = start;
    while v < end {
        let (z, y, x) = unflatten(v, shape);
        let x1 = (x + (end - v)).min(w);
        segments.push((z as isize, y as isize, x, x1, v - start));
        v += x1 - x;
    }

    for c in 0..input.channels() {
        let src = input.channel(c);
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((c * k + dz) * k + dy) * k + dx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let shift = dx as isize - r;
                    for &(z, y, x0, x1, off) in &segments {
                        let seg = &mut dst[off..off + (x1 - x0)];
                        let sz = z + dz as isize - r;
                        let sy = y + dy as isize - r;
                        if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let base = ((sz as usize) * h + sy as usize) * w;
                        let lo = (x0 as isize).max(-shift);
                        let hi = (x1 as isize).min(w as isize - shift);
                        if lo >= hi {
                            seg.fill(T::zero());
                            continue;
                        }
                        let (lo_off, hi_off) = ((lo - x0 as isize) as usize, (hi - x0 as isize) as usize);
                        seg[..lo_off].fill(T::zero());
                        let s0 = (base as isize + lo + shift) as usize;
                        seg[lo_off..hi_off].copy_from_slice(&src[s0..s0 + (hi_off - lo_off)]);
                        seg[hi_off..].fill(T::zero());
                    }
                }
            }
        }
    }
}

/// Same-padded (zero) 3D convolution.
pub fn conv3d<T: Real>(input: &Grid<T>, kernel: &ConvKernel3D<T>) -> Result<Grid<T>> {
    if kernel.in_c != input.channels() {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_c,
            actual: input.channels(),
        });
    }
    let n_vox = input.voxels();
    let rows = kernel.in_c * kernel.k.pow(3);
    let mut out = Grid::zeros(kernel.out_c, input.shape());
    for o in 0..kernel.out_c {
        out.channel_mut(o).fill(kernel.bias[o]);
    }
    let chunk = voxel_chunk(rows);
    let mut col = Vec::new();
    let mut start = 0;
    while start < n_vox {
        let end = (start + chunk).min(n_vox);
        let n = end - start;
        col.resize(rows * n, T::zero());
        im2col_chunk(input, kernel.k, start, end, &mut col);
        gemm(
            kernel.out_c,
            rows,
            n,
            T::one(),
            MatRef::rows(&kernel.weights, rows),
            MatRef::rows(&col, n),
            T::one(),
            &mut out.data_mut()[start..],
            n_vox,
            1,
        );
        start = end;
    }
    Ok(out)
}

/// Adjoint of [`conv3d`] for upstream gradient `grad_out`.
pub fn conv3d_backward<T: Real>(
    input: &Grid<T>,
    kernel: &ConvKernel3D<T>,
    grad_out: &Grid<T>,
) -> Result<ConvGrads<T>> {
    if kernel.in_c != input.channels() {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_c,
            actual: input.channels(),
        });
    }
    if grad_out.channels() != kernel.out_c {
        return Err(Error::ChannelMismatch {
            expected: kernel.out_c,
            actual: grad_out.channels(),
        });
    }
    input.ensure_same_shape(grad_out.shape())?;

    let bias = (0..kernel.out_c)
        .map(|o| grad_out.channel(o).iter().copied().sum())
        .collect();

    let n_vox = input.voxels();
    let rows = kernel.in_c * kernel.k.pow(3);
    let mut weights = vec![T::zero(); kernel.out_c * rows];
    let chunk = voxel_chunk(rows);
    let mut col = Vec::new();
    let mut start = 0;
    while start < n_vox {
        let end = (start + chunk).min(n_vox);
        let n = end - start;
        col.resize(rows * n, T::zero());
        im2col_chunk(input, kernel.k, start, end, &mut col);
        gemm(
            kernel.out_c,
            n,
            rows,
            T::one(),
            MatRef::new(&grad_out.data()[start..], n_vox, 1),
            MatRef::rows_t(&col, n),
            T::one(),
            &mut weights,
            rows,
            1,
        );
        start = end;
    }

    let input_grad = conv3d(grad_out, &kernel.adjoint())?;
    Ok(ConvGrads {
        input: input_grad,
        weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, shape: [usize; 3]) -> Grid<f64> {
        Grid::from_fn(c, shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> ConvKernel3D<f64> {
        let w = (0..o * i * k * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvKernel3D::new(o, i, k, w, b).unwrap()
    }

    /// Explicit zero-padding followed by nested-loop multiply-accumulate.
    fn oracle(input: &Grid<f64>, kernel: &ConvKernel3D<f64>) -> Grid<f64> {
        let [d, h, w] = input.shape();
        let k = kernel.side();
        let r = k / 2;
        let padded_shape = [d + 2 * r, h + 2 * r, w + 2 * r];
        let mut padded = Grid::zeros(input.channels(), padded_shape);
        for c in 0..input.channels() {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        padded.set(c, z + r, y + r, x + r, input.get(c, z, y, x));
                    }
                }
            }
        }
        Grid::from_fn(kernel.out_channels(), [d, h, w], |o, z, y, x| {
            let mut acc = kernel.bias[o];
            for i in 0..kernel.in_channels() {
                for dz in 0..k {
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += kernel.weights[kernel.weight_index(o, i, dz, dy, dx)]
                                * padded.get(i, z + dz, y + dy, x + dx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_returns_input() {
        let input = Grid::<f32>::filled(1, [2, 2, 2], 1.0);
        let mut kernel = ConvKernel3D::zeros(1, 1, 3).unwrap();
        let centre = kernel.weight_index(0, 0, 1, 1, 1);
        kernel.weights[centre] = 1.0;
        assert_eq!(conv3d(&input, &kernel).unwrap(), input);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_grid(&mut rng, 2, [3, 4, 5]).cast::<f32>();
        let mut kernel = ConvKernel3D::<f32>::zeros(3, 2, 3).unwrap();
        kernel.bias = vec![0.5, -1.0, 2.0];
        let out = conv3d(&input, &kernel).unwrap();
        for o in 0..3 {
            assert!(out.channel(o).iter().all(|&v| v == kernel.bias[o]));
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, shape) in &[(3, [3, 3, 3]), (3, [4, 5, 6]), (5, [3, 6, 4]), (1, [2, 3, 4])] {
            let input = random_grid(&mut rng, 2, shape);
            let kernel = random_kernel(&mut rng, 2, 2, k);
            let got = conv3d(&input, &kernel).unwrap();
            let want = oracle(&input, &kernel);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn even_kernel_and_channel_mismatch_are_rejected() {
        assert!(matches!(ConvKernel3D::<f32>::zeros(1, 1, 2), Err(Error::EvenKernel(2))));
        let kernel = ConvKernel3D::<f32>::zeros(1, 2, 3).unwrap();
        let input = Grid::<f32>::zeros(3, [2, 2, 2]);
        assert!(matches!(conv3d(&input, &kernel), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn chunked_path_matches_oracle_on_large_grid() {
        // Forces several im2col chunks with rows straddling chunk borders.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_grid(&mut rng, 40, [11, 13, 17]);
        let kernel = random_kernel(&mut rng, 2, 40, 3);
        assert!(voxel_chunk(40 * 27) < input.voxels());
        let got = conv3d(&input, &kernel).unwrap();
        let want = oracle(&input, &kernel);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
