//! Unsupervised training objective and its adjoints.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volgrid::Grid;
use crate::warpfield::{warp_trilinear_backward, warp_trilinear_region, FlowField};

/// Guard added to NCC and Dice denominators.
pub const LOSS_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Mse,
    Ncc,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Mse => "mse",
            Similarity::Ncc => "ncc",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Similarity::Mse),
            "ncc" => Ok(Similarity::Ncc),
            other => Err(Error::InvalidConfig(format!("unknown similarity {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub similarity: Similarity,
    pub lambda_smooth: f64,
    pub lambda_seg: f64,
    pub ncc_window: usize,
    /// Weight of the similarity term evaluated on the coarse level's own
    /// flow (0 disables it).
    pub aux_coarse_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            similarity: Similarity::Mse,
            lambda_smooth: 0.01,
            lambda_seg: 1.0,
            ncc_window: 9,
            aux_coarse_weight: 0.0,
        }
    }
}

impl LossWeights {
    /// NCC similarity with its conventional smoothness weight.
    pub fn ncc() -> Self {
        Self {
            similarity: Similarity::Ncc,
            lambda_smooth: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda_smooth, self.lambda_seg, self.aux_coarse_weight]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.ncc_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ncc_window must be odd, got {}",
                self.ncc_window
            )));
        }
        Ok(())
    }
}

/// Mean squared difference.
pub fn mse_loss<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Result<T> {
    a.ensure_same_layout(b)?;
    let n = T::from_usize(a.len().max(1)).unwrap();
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        / n)
}

/// Gradient of [`mse_loss`] w.r.t. `a` (the gradient w.r.t. `b` is its
/// negation).
pub fn mse_backward<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Result<Grid<T>> {
    a.ensure_same_layout(b)?;
    let scale = T::from_f64_lossy(2.0 / a.len().max(1) as f64);
    Grid::new(
        a.channels(),
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| scale * (x - y))
            .collect(),
    )
}

/// Zero-padded cubic box sum of side `window` over every channel.
fn box_sum(data: &[f64], shape: [usize; 3], window: usize) -> Vec<f64> {
    let r = window / 2;
    let mut cur = data.to_vec();
    let mut tmp = vec![0.0; data.len()];
    for axis in 0..3 {
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer = data.len() / (len * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                // Prefix sums along the line.
                let mut prefix = Vec::with_capacity(len + 1);
                prefix.push(0.0);
                for k in 0..len {
                    prefix.push(prefix[k] + cur[at(k)]);
                }
                for k in 0..len {
                    let lo = k.saturating_sub(r);
                    let hi = (k + r + 1).min(len);
                    tmp[at(k)] = prefix[hi] - prefix[lo];
                }
            }
        }
        std::mem::swap(&mut cur, &mut tmp);
    }
    cur
}

struct NccStats {
    /// In-bounds voxels per window.
    n: Vec<f64>,
    cc: Vec<f64>,
    sa: Vec<f64>,
    sb: Vec<f64>,
    cross: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
}

fn ncc_stats(a: &[f64], b: &[f64], shape: [usize; 3], window: usize, eps: f64) -> NccStats {
    let n = box_sum(&vec![1.0; a.len()], shape, window);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let sa = box_sum(a, shape, window);
    let sb = box_sum(b, shape, window);
    let saa = box_sum(&sq(a, a), shape, window);
    let sbb = box_sum(&sq(b, b), shape, window);
    let sab = box_sum(&sq(a, b), shape, window);
    let len = a.len();
    let mut cross = vec![0.0; len];
    let mut var_a = vec![0.0; len];
    let mut var_b = vec![0.0; len];
    let mut cc = vec![0.0; len];
    for i in 0..len {
        cross[i] = sab[i] - sa[i] * sb[i] / n[i];
        var_a[i] = saa[i] - sa[i] * sa[i] / n[i];
        var_b[i] = sbb[i] - sb[i] * sb[i] / n[i];
        cc[i] = cross[i] * cross[i] / (var_a[i] * var_b[i] + eps);
    }
    NccStats {
        n,
        cc,
        sa,
        sb,
        cross,
        var_a,
        var_b,
    }
}

fn ncc_check<T: Real>(a: &Grid<T>, b: &Grid<T>, window: usize) -> Result<()> {
    a.ensure_same_layout(b)?;
    if a.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: a.channels(),
        });
    }
    if window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("ncc window must be odd, got {window}")));
    }
    Ok(())
}

fn to_f64<T: Real>(g: &Grid<T>) -> Vec<f64> {
    g.data().iter().map(|v| v.as_f64()).collect()
}

/// `1 - mean(cross^2 / (var_a * var_b + eps))` over local cubic windows
/// (single-channel inputs). Windows are clipped at the border: sums are
/// zero-padded and the statistics use the in-bounds voxel count, which keeps
/// the loss invariant to affine intensity maps.
pub fn ncc_loss<T: Real>(a: &Grid<T>, b: &Grid<T>, window: usize, eps: f64) -> Result<T> {
    ncc_check(a, b, window)?;
    let s = ncc_stats(&to_f64(a), &to_f64(b), a.shape(), window, eps);
    let mean = s.cc.iter().sum::<f64>() / s.cc.len() as f64;
    Ok(T::from_f64_lossy(1.0 - mean))
}

/// Gradients of [`ncc_loss`] w.r.t. `a` and `b`.
pub fn ncc_backward<T: Real>(
    a: &Grid<T>,
    b: &Grid<T>,
    window: usize,
    eps: f64,
) -> Result<(Grid<T>, Grid<T>)> {
    ncc_check(a, b, window)?;
    let (av, bv) = (to_f64(a), to_f64(b));
    let shape = a.shape();
    let s = ncc_stats(&av, &bv, shape, window, eps);
    let len = av.len();
    let n = &s.n;
    let dl_dcc = -1.0 / len as f64;
    // Per-window sensitivities of the loss to each windowed sum.
    let mut g_sa = vec![0.0; len];
    let mut g_sb = vec![0.0; len];
    let mut g_saa = vec![0.0; len];
    let mut g_sbb = vec![0.0; len];
    let mut g_sab = vec![0.0; len];
    for i in 0..len {
        let den = s.var_a[i] * s.var_b[i] + eps;
        let d_cross = dl_dcc * 2.0 * s.cross[i] / den;
        let d_var_a = -dl_dcc * s.cc[i] * s.var_b[i] / den;
        let d_var_b = -dl_dcc * s.cc[i] * s.var_a[i] / den;
        g_sab[i] = d_cross;
        g_saa[i] = d_var_a;
        g_sbb[i] = d_var_b;
        g_sa[i] = -d_cross * s.sb[i] / n[i] - d_var_a * 2.0 * s.sa[i] / n[i];
        g_sb[i] = -d_cross * s.sa[i] / n[i] - d_var_b * 2.0 * s.sb[i] / n[i];
    }
    // The zero-padded box filter is self-adjoint.
    let (b_sa, b_sb) = (box_sum(&g_sa, shape, window), box_sum(&g_sb, shape, window));
    let (b_saa, b_sbb) = (box_sum(&g_saa, shape, window), box_sum(&g_sbb, shape, window));
    let b_sab = box_sum(&g_sab, shape, window);
    let ga = (0..len)
        .map(|i| T::from_f64_lossy(b_sa[i] + 2.0 * av[i] * b_saa[i] + bv[i] * b_sab[i]))
        .collect();
    let gb = (0..len)
        .map(|i| T::from_f64_lossy(b_sb[i] + 2.0 * bv[i] * b_sbb[i] + av[i] * b_sab[i]))
        .collect();
    Ok((Grid::new(1, shape, ga)?, Grid::new(1, shape, gb)?))
}

fn check_smooth<T: Real>(flow: &FlowField<T>) -> Result<()> {
    if flow.shape().iter().any(|&s| s < 2) {
        return Err(Error::DegenerateVolume(flow.shape()));
    }
    Ok(())
}

/// Squared forward differences: for each axis the mean over voxels that have
/// a forward neighbour, summed over axes, then averaged over the three
/// components.
pub fn smoothness_loss<T: Real>(flow: &FlowField<T>) -> Result<T> {
    check_smooth(flow)?;
    let shape = flow.shape();
    let g = flow.grid();
    let mut total = 0.0f64;
    for axis in 0..3 {
        let mut counted = shape;
        counted[axis] -= 1;
        let count = counted.iter().product::<usize>() as f64;
        let stride: usize = shape[axis + 1..].iter().product();
        let mut acc = 0.0;
        for c in 0..3 {
            let ch = g.channel(c);
            for z in 0..counted[0] {
                for y in 0..counted[1] {
                    for x in 0..counted[2] {
                        let i = (z * shape[1] + y) * shape[2] + x;
                        let d = (ch[i + stride] - ch[i]).as_f64();
                        acc += d * d;
                    }
                }
            }
        }
        total += acc / count;
    }
    Ok(T::from_f64_lossy(total / 3.0))
}

pub fn smoothness_backward<T: Real>(flow: &FlowField<T>) -> Result<FlowField<T>> {
    check_smooth(flow)?;
    let shape = flow.shape();
    let g = flow.grid();
    let n = g.voxels();
    let mut out = vec![0.0f64; 3 * n];
    for axis in 0..3 {
        let mut counted = shape;
        counted[axis] -= 1;
        let count = counted.iter().product::<usize>() as f64;
        let scale = 2.0 / (3.0 * count);
        let stride: usize = shape[axis + 1..].iter().product();
        for c in 0..3 {
            let ch = g.channel(c);
            for z in 0..counted[0] {
                for y in 0..counted[1] {
                    for x in 0..counted[2] {
                        let i = (z * shape[1] + y) * shape[2] + x;
                        let d = (ch[i + stride] - ch[i]).as_f64() * scale;
                        out[c * n + i + stride] += d;
                        out[c * n + i] -= d;
                    }
                }
            }
        }
    }
    FlowField::new(Grid::new(3, shape, out.into_iter().map(T::from_f64_lossy).collect())?)
}

fn dice_sums<T: Real>(p: &Grid<T>, q: &Grid<T>) -> Result<Vec<(f64, f64, f64)>> {
    p.ensure_same_layout(q)?;
    if p.channels() < 2 {
        return Err(Error::ChannelMismatch {
            expected: 2,
            actual: p.channels(),
        });
    }
    Ok((1..p.channels())
        .map(|l| {
            let (pc, qc) = (p.channel(l), q.channel(l));
            let mut inter = 0.0;
            let mut sp = 0.0;
            let mut sq = 0.0;
            for (&a, &b) in pc.iter().zip(qc) {
                let (a, b) = (a.as_f64(), b.as_f64());
                inter += a * b;
                sp += a;
                sq += b;
            }
            (inter, sp, sq)
        })
        .collect())
}

/// `1 - mean_l (2 sum(pq) + eps) / (sum(p) + sum(q) + eps)` over labels
/// `1..L` (channel 0 is background and excluded).
pub fn soft_dice_loss<T: Real>(p: &Grid<T>, q: &Grid<T>, eps: f64) -> Result<T> {
    let sums = dice_sums(p, q)?;
    let mean = sums
        .iter()
        .map(|&(i, sp, sq)| (2.0 * i + eps) / (sp + sq + eps))
        .sum::<f64>()
        / sums.len() as f64;
    Ok(T::from_f64_lossy(1.0 - mean))
}

/// Gradient of [`soft_dice_loss`] w.r.t. its first argument.
pub fn soft_dice_backward<T: Real>(p: &Grid<T>, q: &Grid<T>, eps: f64) -> Result<Grid<T>> {
    let sums = dice_sums(p, q)?;
    let labels = sums.len() as f64;
    let mut g = Grid::zeros(p.channels(), p.shape());
    for (li, &(inter, sp, sq)) in sums.iter().enumerate() {
        let l = li + 1;
        let num = 2.0 * inter + eps;
        let den = sp + sq + eps;
        let qc = q.channel(l);
        for (o, &qv) in g.channel_mut(l).iter_mut().zip(qc) {
            let d = (2.0 * qv.as_f64() * den - num) / (den * den);
            *o = T::from_f64_lossy(-d / labels);
        }
    }
    Ok(g)
}

/// Inputs to [`total_loss_region`]. `fixed` and `fixed_onehot` cover the
/// region being registered; `moving` and `moving_onehot` are full volumes,
/// sampled at `origin + p + flow(p)`.
pub struct LossInputs<'a, T> {
    pub fixed: &'a Grid<T>,
    pub moving: &'a Grid<T>,
    pub origin: [usize; 3],
    pub fixed_onehot: Option<&'a Grid<T>>,
    pub moving_onehot: Option<&'a Grid<T>>,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub total: f64,
    pub sim: f64,
    pub smooth: f64,
    pub seg: Option<f64>,
    pub grad_flow: FlowField<T>,
}

/// Similarity of `fixed` against the warped moving image plus its flow
/// gradient (no smoothness or segmentation terms).
pub fn similarity_term<T: Real>(
    fixed: &Grid<T>,
    moving: &Grid<T>,
    origin: [usize; 3],
    flow: &FlowField<T>,
    weights: &LossWeights,
) -> Result<(f64, FlowField<T>)> {
    fixed.ensure_same_shape(flow.shape())?;
    let warped = warp_trilinear_region(moving, flow, origin)?;
    let (value, grad_warped) = match weights.similarity {
        Similarity::Mse => (mse_loss(fixed, &warped)?.as_f64(), mse_backward(&warped, fixed)?),
        Similarity::Ncc => (
            ncc_loss(fixed, &warped, weights.ncc_window, LOSS_EPSILON)?.as_f64(),
            ncc_backward(fixed, &warped, weights.ncc_window, LOSS_EPSILON)?.1,
        ),
    };
    let grads = warp_trilinear_backward(moving, flow, origin, &grad_warped, false)?;
    Ok((value, grads.flow))
}

/// `L_sim + lambda_smooth * L_smooth + lambda_seg * L_seg` and its gradient
/// w.r.t. the flow.
pub fn total_loss_region<T: Real>(
    inputs: &LossInputs<'_, T>,
    flow: &FlowField<T>,
    weights: &LossWeights,
) -> Result<LossOutput<T>> {
    weights.validate()?;
    let (sim, mut grad) = similarity_term(inputs.fixed, inputs.moving, inputs.origin, flow, weights)?;
    let smooth = smoothness_loss(flow)?.as_f64();
    let mut gs = smoothness_backward(flow)?;
    gs.grid_mut().scale(T::from_f64_lossy(weights.lambda_smooth));
    grad.grid_mut().add_assign(gs.grid())?;
    let mut total = sim + weights.lambda_smooth * smooth;

    let seg = match (inputs.fixed_onehot, inputs.moving_onehot) {
        (Some(f), Some(m)) => {
            let warped = warp_trilinear_region(m, flow, inputs.origin)?;
            let value = soft_dice_loss(&warped, f, LOSS_EPSILON)?.as_f64();
            let mut gw = soft_dice_backward(&warped, f, LOSS_EPSILON)?;
            gw.scale(T::from_f64_lossy(weights.lambda_seg));
            let g = warp_trilinear_backward(m, flow, inputs.origin, &gw, false)?;
            grad.grid_mut().add_assign(g.flow.grid())?;
            total += weights.lambda_seg * value;
            Some(value)
        }
        _ => None,
    };
    Ok(LossOutput {
        total,
        sim,
        smooth,
        seg,
        grad_flow: grad,
    })
}

/// Whole-volume [`total_loss_region`]; pass one-hot segmentations (label
/// channels) to enable the overlap term.
pub fn total_loss<T: Real>(
    fixed: &Grid<T>,
    moving: &Grid<T>,
    flow: &FlowField<T>,
    segs: Option<(&Grid<T>, &Grid<T>)>,
    weights: &LossWeights,
) -> Result<LossOutput<T>> {
    fixed.ensure_same_shape(moving.shape())?;
    total_loss_region(
        &LossInputs {
            fixed,
            moving,
            origin: [0, 0, 0],
            fixed_onehot: segs.map(|s| s.0),
            moving_onehot: segs.map(|s| s.1),
        },
        flow,
        weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(rng: &mut ChaCha8Rng, c: usize, shape: [usize; 3]) -> Grid<f64> {
        Grid::from_fn(c, shape, |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn mse_cases() {
        let a = Grid::<f32>::zeros(1, [2, 2, 2]);
        let b = Grid::<f32>::filled(1, [2, 2, 2], 1.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_grid(&mut rng, 2, [3, 4, 5]);
        let y = rand_grid(&mut rng, 2, [3, 4, 5]);
        let diffs: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let oracle = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((mse_loss(&x, &y).unwrap() - oracle).abs() <= 1e-6);
        assert!(mse_loss(&x, &Grid::zeros(2, [3, 4, 4])).is_err());
    }

    /// Direct per-voxel window statistics.
    fn ncc_oracle(a: &Grid<f64>, b: &Grid<f64>, window: usize, eps: f64) -> f64 {
        let [d, h, w] = a.shape();
        let r = window as isize / 2;
        let mut total = 0.0;
        for z in 0..d as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut vals = Vec::new();
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (sz, sy, sx) = (z + dz, y + dy, x + dx);
                                let inside = (0..d as isize).contains(&sz)
                                    && (0..h as isize).contains(&sy)
                                    && (0..w as isize).contains(&sx);
                                if inside {
                                    let (sz, sy, sx) = (sz as usize, sy as usize, sx as usize);
                                    vals.push((a.get(0, sz, sy, sx), b.get(0, sz, sy, sx)));
                                }
                            }
                        }
                    }
                    let n = vals.len() as f64;
                    let ma = vals.iter().map(|v| v.0).sum::<f64>() / n;
                    let mb = vals.iter().map(|v| v.1).sum::<f64>() / n;
                    let cross: f64 = vals.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum();
                    let va: f64 = vals.iter().map(|v| (v.0 - ma).powi(2)).sum();
                    let vb: f64 = vals.iter().map(|v| (v.1 - mb).powi(2)).sum();
                    total += cross * cross / (va * vb + eps);
                }
            }
        }
        1.0 - total / (d * h * w) as f64
    }

    #[test]
    fn ncc_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_grid(&mut rng, 1, [8, 8, 8]);
        assert!(ncc_loss(&a, &a, 9, LOSS_EPSILON).unwrap() <= 1e-3);
        let affine = a.map(|v| 2.0 * v + 1.0);
        assert!(ncc_loss(&a, &affine, 9, LOSS_EPSILON).unwrap() <= 1e-3);
        let b = rand_grid(&mut rng, 1, [8, 8, 8]);
        let got = ncc_loss(&a, &b, 3, LOSS_EPSILON).unwrap();
        assert!((got - ncc_oracle(&a, &b, 3, LOSS_EPSILON)).abs() <= 1e-4);
        assert!(got > 0.5);
        assert!(ncc_loss(&a, &b, 4, LOSS_EPSILON).is_err());
    }

    #[test]
    fn smoothness_cases() {
        let c = FlowField::<f32>::constant([3, 4, 5], [1.0, -2.0, 0.5]);
        assert_eq!(smoothness_loss(&c).unwrap(), 0.0);
        let ramp = FlowField::<f64>::from_fn([4, 5, 6], |c, _, _, x| if c == 0 { x as f64 } else { 0.0 });
        assert!((smoothness_loss(&ramp).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(smoothness_loss(&FlowField::<f32>::zeros([1, 3, 3])).is_err());
    }

    #[test]
    fn smoothness_matches_forward_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = FlowField::new(rand_grid(&mut rng, 3, [3, 4, 5])).unwrap();
        let g = flow.grid();
        let mut per_axis = [0.0f64; 3];
        for c in 0..3 {
            for z in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        if x + 1 < 5 {
                            per_axis[0] += (g.get(c, z, y, x + 1) - g.get(c, z, y, x)).powi(2) / (3.0 * 4.0 * 4.0);
                        }
                        if y + 1 < 4 {
                            per_axis[1] += (g.get(c, z, y + 1, x) - g.get(c, z, y, x)).powi(2) / (3.0 * 3.0 * 5.0);
                        }
                        if z + 1 < 3 {
                            per_axis[2] += (g.get(c, z + 1, y, x) - g.get(c, z, y, x)).powi(2) / (2.0 * 4.0 * 5.0);
                        }
                    }
                }
            }
        }
        let oracle = per_axis.iter().sum::<f64>() / 3.0;
        assert!((smoothness_loss(&flow).unwrap() - oracle).abs() < 1e-12);
    }

    fn cube(shape: [usize; 3], origin: [usize; 3]) -> Grid<f64> {
        Grid::from_fn(2, shape, |c, z, y, x| {
            let inside = (origin[0]..origin[0] + 2).contains(&z)
                && (origin[1]..origin[1] + 2).contains(&y)
                && (origin[2]..origin[2] + 2).contains(&x);
            if (c == 1) == inside {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn soft_dice_cases() {
        let a = cube([4, 4, 4], [0, 0, 0]);
        assert!(soft_dice_loss(&a, &a, LOSS_EPSILON).unwrap() <= 1e-4);
        let far = cube([4, 4, 4], [2, 2, 2]);
        assert!((soft_dice_loss(&a, &far, LOSS_EPSILON).unwrap() - 1.0).abs() < 1e-5);
        let half = cube([4, 4, 4], [0, 0, 1]);
        assert!((soft_dice_loss(&a, &half, LOSS_EPSILON).unwrap() - 0.5).abs() < 1e-5);
        let sym = (soft_dice_loss(&a, &half, LOSS_EPSILON).unwrap(), soft_dice_loss(&half, &a, LOSS_EPSILON).unwrap());
        assert_eq!(sym.0, sym.1);
    }

    #[test]
    fn total_loss_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_grid(&mut rng, 1, [4, 4, 4]);
        let m = rand_grid(&mut rng, 1, [4, 4, 4]);
        let zero = FlowField::zeros([4, 4, 4]);
        let w = LossWeights::default();
        let same = total_loss(&f, &f, &zero, None, &w).unwrap();
        assert_eq!(same.total, 0.0);
        let diff = total_loss(&f, &m, &zero, None, &w).unwrap();
        assert_eq!(diff.smooth, 0.0);
        assert_eq!(diff.total, diff.sim);
        assert_eq!(diff.sim, mse_loss(&f, &m).unwrap());
        assert!(diff.seg.is_none());
    }
}
