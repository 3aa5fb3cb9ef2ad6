//! Evaluation measures: label overlap, structural similarity, folding count.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volgrid::Grid;
use crate::warpfield::{count_nonpositive_jacobian, warp_nearest, warp_trilinear, FlowField, LabelMap};

#[derive(Clone, Debug, PartialEq)]
pub struct DiceScores {
    /// Entry `l - 1` holds label `l`; `None` when the label is absent from
    /// both maps.
    pub per_label: Vec<Option<f64>>,
    /// Mean over present labels; `None` when no foreground exists at all.
    pub mean: Option<f64>,
}

/// Per-label `2|A∩B| / (|A|+|B|)` for labels `1..num_labels`.
pub fn dice_score(a: &LabelMap, b: &LabelMap) -> Result<DiceScores> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let labels = a.num_labels().max(b.num_labels()) as usize;
    let mut inter = vec![0u64; labels];
    let mut count_a = vec![0u64; labels];
    let mut count_b = vec![0u64; labels];
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        count_a[la as usize] += 1;
        count_b[lb as usize] += 1;
        if la == lb {
            inter[la as usize] += 1;
        }
    }
    let per_label: Vec<Option<f64>> = (1..labels)
        .map(|l| {
            let denom = count_a[l] + count_b[l];
            (denom > 0).then(|| 2.0 * inter[l] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_label.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(DiceScores { per_label, mean })
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// 3D summed-area table with a zero border: `t[(z+1, y+1, x+1)]` is the sum
/// over `[0..=z, 0..=y, 0..=x]`.
struct Integral {
    dims: [usize; 3],
    t: Vec<f64>,
}

impl Integral {
    fn new(values: impl Iterator<Item = f64>, shape: [usize; 3]) -> Self {
        let dims = [shape[0] + 1, shape[1] + 1, shape[2] + 1];
        let mut t = vec![0.0; dims.iter().product()];
        let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
        let mut it = values;
        for z in 1..dims[0] {
            for y in 1..dims[1] {
                for x in 1..dims[2] {
                    let v = it.next().expect("value per voxel");
                    t[idx(z, y, x)] = v + t[idx(z - 1, y, x)] + t[idx(z, y - 1, x)] + t[idx(z, y, x - 1)]
                        - t[idx(z - 1, y - 1, x)]
                        - t[idx(z - 1, y, x - 1)]
                        - t[idx(z, y - 1, x - 1)]
                        + t[idx(z - 1, y - 1, x - 1)];
                }
            }
        }
        Self { dims, t }
    }

    /// Sum over the cube of side `w` starting at `(z, y, x)`.
    fn cube(&self, z: usize, y: usize, x: usize, w: usize) -> f64 {
        let d = self.dims;
        let at = |z: usize, y: usize, x: usize| self.t[(z * d[1] + y) * d[2] + x];
        let (z1, y1, x1) = (z + w, y + w, x + w);
        at(z1, y1, x1) - at(z, y1, x1) - at(z1, y, x1) - at(z1, y1, x) + at(z, y, x1) + at(z, y1, x) + at(z1, y, x)
            - at(z, y, x)
    }
}

/// SSIM with uniform `window`³ windows, population statistics, and
/// `C1 = (k1 L)²`, `C2 = (k2 L)²` where `L` is the dynamic range of both
/// volumes together; averaged over window positions fully inside the volume.
pub fn ssim3d_with<T: Real>(a: &Grid<T>, b: &Grid<T>, window: usize, k1: f64, k2: f64) -> Result<f64> {
    a.ensure_same_layout(b)?;
    if a.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: a.channels(),
        });
    }
    let shape = a.shape();
    if window == 0 || shape.iter().any(|&s| s < window) {
        return Err(Error::DegenerateVolume(shape));
    }
    let av: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let lo = av.iter().chain(&bv).fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = av.iter().chain(&bv).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let range = hi - lo;
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);

    let sa = Integral::new(av.iter().copied(), shape);
    let sb = Integral::new(bv.iter().copied(), shape);
    let saa = Integral::new(av.iter().map(|v| v * v), shape);
    let sbb = Integral::new(bv.iter().map(|v| v * v), shape);
    let sab = Integral::new(av.iter().zip(&bv).map(|(p, q)| p * q), shape);
    let n = window.pow(3) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=shape[0] - window {
        for y in 0..=shape[1] - window {
            for x in 0..=shape[2] - window {
                let ma = sa.cube(z, y, x, window) / n;
                let mb = sb.cube(z, y, x, window) / n;
                let va = saa.cube(z, y, x, window) / n - ma * ma;
                let vb = sbb.cube(z, y, x, window) / n - mb * mb;
                let cov = sab.cube(z, y, x, window) / n - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                // Identical windows score exactly 1, including flat ones.
                total += if num == den { 1.0 } else { num / den };
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn ssim3d<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Result<f64> {
    ssim3d_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dice_per_label: Vec<Option<f64>>,
    pub dice_mean: Option<f64>,
    pub ssim: f64,
    pub neg_jacobian_count: usize,
    pub inference_seconds: Option<f64>,
    pub params: Option<usize>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "pair_id,dice_mean,ssim,neg_jac,seconds";

    pub fn csv_row(&self, pair_id: &str) -> String {
        format!(
            "{pair_id},{},{:.6},{},{}",
            fmt_opt(self.dice_mean),
            self.ssim,
            self.neg_jacobian_count,
            fmt_opt(self.inference_seconds)
        )
    }

    /// One `key=value` line per field.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (l, d) in self.dice_per_label.iter().enumerate() {
            let _ = writeln!(s, "dice_label_{}={}", l + 1, fmt_opt(*d));
        }
        let _ = writeln!(s, "dice_mean={}", fmt_opt(self.dice_mean));
        let _ = writeln!(s, "ssim={:.6}", self.ssim);
        let _ = writeln!(s, "neg_jacobian_count={}", self.neg_jacobian_count);
        let _ = writeln!(s, "inference_seconds={}", fmt_opt(self.inference_seconds));
        if let Some(p) = self.params {
            let _ = writeln!(s, "params={p}");
        }
        s
    }
}

/// Warps the moving image (trilinear) and segmentation (nearest) with `flow`
/// and scores them against the fixed pair. Dice is only reported when both
/// segmentations are given.
pub fn evaluate_pair(
    fixed: &Grid<f32>,
    fixed_seg: Option<&LabelMap>,
    moving: &Grid<f32>,
    moving_seg: Option<&LabelMap>,
    flow: &FlowField<f32>,
) -> Result<MetricsReport> {
    fixed.ensure_same_shape(moving.shape())?;
    let warped = warp_trilinear(moving, flow)?;
    let ssim = ssim3d(fixed, &warped)?;
    let dice = match (fixed_seg, moving_seg) {
        (Some(f), Some(m)) => Some(dice_score(f, &warp_nearest(m, flow)?)?),
        _ => None,
    };
    Ok(MetricsReport {
        dice_per_label: dice.as_ref().map(|d| d.per_label.clone()).unwrap_or_default(),
        dice_mean: dice.and_then(|d| d.mean),
        ssim,
        neg_jacobian_count: count_nonpositive_jacobian(flow)?,
        inference_seconds: None,
        params: None,
    })
}

/// [`evaluate_pair`] with zero flow: the unregistered reference.
pub fn baseline(
    fixed: &Grid<f32>,
    fixed_seg: Option<&LabelMap>,
    moving: &Grid<f32>,
    moving_seg: Option<&LabelMap>,
) -> Result<MetricsReport> {
    evaluate_pair(fixed, fixed_seg, moving, moving_seg, &FlowField::zeros(fixed.shape()))
}
