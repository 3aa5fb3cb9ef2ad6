//! Shared by the core integration tests and the CLI acceptance suite:
//! brute-force reference implementations and finite-difference check runs.
#![allow(dead_code)]

use ncamorph::engine::{init_model, register_pair_backward, register_pair_traced, ArchConfig, NcaModel, Patch};
use ncamorph::objective::{
    mse_backward, mse_loss, ncc_backward, ncc_loss, smoothness_backward, smoothness_loss, soft_dice_backward,
    soft_dice_loss, total_loss, total_loss_region, LossInputs, LossWeights, LOSS_EPSILON,
};
use ncamorph::volgrid::{
    avg_downsample, avg_downsample_backward, concat_backward, concat_channels, conv3d, conv3d_backward,
    crop_patch, crop_patch_backward, dense_grid, dense_grid_backward, grad_check, relu, relu_backward,
    trilinear_resize, trilinear_resize_backward, GradCheckOptions, GradCheckReport,
};
use ncamorph::warpfield::{upsample_flow, upsample_flow_backward, warp_trilinear, warp_trilinear_backward, FlowField};
use ncamorph::{ConvKernel3D, DensePair, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_grid(rng: &mut ChaCha8Rng, c: usize, shape: [usize; 3], lo: f64, hi: f64) -> Grid<f64> {
    Grid::new(c, shape, rand_vec(rng, c * shape.iter().product::<usize>(), lo, hi)).unwrap()
}

pub fn rand_shape(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(lo..=hi))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flow whose sample positions stay at least 0.1 voxel away from integer
/// coordinates, where trilinear interpolation has kinks.
pub fn off_lattice_flow(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> FlowField<f64> {
    FlowField::from_fn(shape, |_, _, _, _| {
        let mag = rng.random_range(0.1..0.9);
        let whole = rng.random_range(-1i32..=1) as f64;
        whole + mag
    })
}

// ---------------------------------------------------------------- oracles

/// Direct zero-padded correlation sum.
pub fn conv3d_oracle(input: &Grid<f64>, kernel: &ConvKernel3D<f64>) -> Grid<f64> {
    let [d, h, w] = input.shape();
    let k = kernel.side() as isize;
    let r = k / 2;
    Grid::from_fn(kernel.out_channels(), input.shape(), |o, z, y, x| {
        let mut acc = kernel.bias[o];
        for i in 0..kernel.in_channels() {
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let (sz, sy, sx) = (z as isize + dz - r, y as isize + dy - r, x as isize + dx - r);
                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let wi = kernel.weight_index(o, i, dz as usize, dy as usize, dx as usize);
                        acc += kernel.weights[wi] * input.get(i, sz as usize, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Weighted sum over the eight lattice corners around the clamped sample
/// position, weights `prod(1 - |p - corner|)`.
pub fn warp_oracle(volume: &Grid<f64>, flow: &FlowField<f64>) -> Grid<f64> {
    let shape = volume.shape();
    let f = flow.grid();
    Grid::from_fn(volume.channels(), shape, |c, z, y, x| {
        let pos = [
            z as f64 + f.get(2, z, y, x),
            y as f64 + f.get(1, z, y, x),
            x as f64 + f.get(0, z, y, x),
        ];
        let p: Vec<f64> = (0..3).map(|a| pos[a].clamp(0.0, (shape[a] - 1) as f64)).collect();
        let mut acc = 0.0;
        for cz in [p[0].floor(), p[0].floor() + 1.0] {
            for cy in [p[1].floor(), p[1].floor() + 1.0] {
                for cx in [p[2].floor(), p[2].floor() + 1.0] {
                    let wgt = (1.0 - (p[0] - cz).abs()) * (1.0 - (p[1] - cy).abs()) * (1.0 - (p[2] - cx).abs());
                    if wgt == 0.0 {
                        continue;
                    }
                    acc += wgt * volume.get(c, cz as usize, cy as usize, cx as usize);
                }
            }
        }
        acc
    })
}

/// Mean SSIM over every fully interior window, statistics computed directly.
pub fn ssim_oracle(a: &Grid<f64>, b: &Grid<f64>, window: usize) -> f64 {
    let [d, h, w] = a.shape();
    let all: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    let range = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - all.iter().cloned().fold(f64::INFINITY, f64::min);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for z in 0..=d - window {
        for y in 0..=h - window {
            for x in 0..=w - window {
                let mut va = Vec::new();
                let mut vb = Vec::new();
                for dz in 0..window {
                    for dy in 0..window {
                        for dx in 0..window {
                            va.push(a.get(0, z + dz, y + dy, x + dx));
                            vb.push(b.get(0, z + dz, y + dy, x + dx));
                        }
                    }
                }
                let n = va.len() as f64;
                let ma = va.iter().sum::<f64>() / n;
                let mb = vb.iter().sum::<f64>() / n;
                let sa = va.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                let sb = vb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                let sab = va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                total += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Per-voxel correlation over the in-bounds part of each window.
pub fn ncc_oracle(a: &Grid<f64>, b: &Grid<f64>, window: usize) -> f64 {
    let [d, h, w] = a.shape();
    let r = (window / 2) as isize;
    let mut total = 0.0;
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut pairs = Vec::new();
                for sz in (z - r).max(0)..=(z + r).min(d as isize - 1) {
                    for sy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                        for sx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                            let (sz, sy, sx) = (sz as usize, sy as usize, sx as usize);
                            pairs.push((a.get(0, sz, sy, sx), b.get(0, sz, sy, sx)));
                        }
                    }
                }
                let n = pairs.len() as f64;
                let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
                let cross: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
                let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
                let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
                total += cross * cross / (va * vb + LOSS_EPSILON);
            }
        }
    }
    1.0 - total / (d * h * w) as f64
}

/// Determinant by the Leibniz permutation formula.
fn leibniz_det(m: &[[f64; 3]; 3]) -> f64 {
    const PERMS: [([usize; 3], f64); 6] = [
        ([0, 1, 2], 1.0),
        ([1, 2, 0], 1.0),
        ([2, 0, 1], 1.0),
        ([0, 2, 1], -1.0),
        ([2, 1, 0], -1.0),
        ([1, 0, 2], -1.0),
    ];
    PERMS.iter().map(|(p, s)| s * m[0][p[0]] * m[1][p[1]] * m[2][p[2]]).sum()
}

/// `det(I + grad u)` with central differences inside and one-sided
/// differences on the faces; components and axes ordered `(x, y, z)`.
pub fn jacobian_oracle(flow: &FlowField<f64>) -> Grid<f64> {
    let g = flow.grid();
    let shape = g.shape();
    Grid::from_fn(1, shape, |_, z, y, x| {
        let here = [x, y, z];
        let dims = [shape[2], shape[1], shape[0]];
        let mut m = [[0.0; 3]; 3];
        for comp in 0..3 {
            for axis in 0..3 {
                let at = |k: usize| {
                    let mut p = here;
                    p[axis] = k;
                    g.get(comp, p[2], p[1], p[0])
                };
                let i = here[axis];
                let d = if i == 0 {
                    at(1) - at(0)
                } else if i + 1 == dims[axis] {
                    at(i) - at(i - 1)
                } else {
                    (at(i + 1) - at(i - 1)) / 2.0
                };
                m[comp][axis] = d + if comp == axis { 1.0 } else { 0.0 };
            }
        }
        leibniz_det(&m)
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------- gradient runs

/// Outcome of one primitive's finite-difference runs.
#[derive(Debug)]
pub struct GradSummary {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements that needed the finer finite-difference step.
    pub kinks: usize,
    pub passed: bool,
}

fn summarize(name: &'static str, reports: Vec<GradCheckReport>) -> GradSummary {
    GradSummary {
        name,
        instances: reports.len(),
        max_rel_error: reports.iter().fold(0.0, |m, r| m.max(r.max_rel_error)),
        checked: reports.iter().map(|r| r.checked).sum(),
        kinks: reports.iter().map(|r| r.kinks).sum(),
        passed: reports.iter().all(|r| r.passed),
    }
}

/// `loss = <f(x), up>` so the analytic gradient is the VJP with `up`.
fn projected(out: &[f64], up: &[f64]) -> f64 {
    dot(out, up)
}

pub fn check_conv(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(100 + s);
            let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 3, 5][r.random_range(0..3)];
            let shape = rand_shape(&mut r, 2, 5);
            let x = rand_grid(&mut r, ci, shape, -1.0, 1.0);
            let kern = ConvKernel3D::new(co, ci, k, rand_vec(&mut r, co * ci * k * k * k, -1.0, 1.0), rand_vec(&mut r, co, -1.0, 1.0)).unwrap();
            let up = rand_vec(&mut r, co * shape.iter().product::<usize>(), -1.0, 1.0);
            let g = conv3d_backward(&x, &kern, &Grid::new(co, shape, up.clone()).unwrap()).unwrap();
            grad_check(
                |p| {
                    let kk = ConvKernel3D::new(co, ci, k, p[1].clone(), p[2].clone()).unwrap();
                    projected(conv3d(&Grid::new(ci, shape, p[0].clone()).unwrap(), &kk).unwrap().data(), &up)
                },
                &[x.data().to_vec(), kern.weights.clone(), kern.bias.clone()],
                &[g.input.data().to_vec(), g.weights, g.bias],
                opts,
            )
        })
        .collect();
    summarize("conv3d", reports)
}

pub fn check_dense(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(200 + s);
            let (i, o) = (r.random_range(1..=6), r.random_range(1..=6));
            let shape = rand_shape(&mut r, 1, 3);
            let x = rand_grid(&mut r, i, shape, -1.0, 1.0);
            let layer = DensePair::new(o, i, rand_vec(&mut r, o * i, -1.0, 1.0), rand_vec(&mut r, o, -1.0, 1.0)).unwrap();
            let up = rand_vec(&mut r, o * shape.iter().product::<usize>(), -1.0, 1.0);
            let g = dense_grid_backward(&x, &layer, &Grid::new(o, shape, up.clone()).unwrap()).unwrap();
            grad_check(
                |p| {
                    let l = DensePair::new(o, i, p[1].clone(), p[2].clone()).unwrap();
                    projected(dense_grid(&Grid::new(i, shape, p[0].clone()).unwrap(), &l).unwrap().data(), &up)
                },
                &[x.data().to_vec(), layer.weights.clone(), layer.bias.clone()],
                &[g.input.data().to_vec(), g.weights, g.bias],
                opts,
            )
        })
        .collect();
    summarize("dense", reports)
}

pub fn check_relu(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(300 + s);
            let shape = rand_shape(&mut r, 1, 4);
            // Keep inputs away from the kink at 0.
            let x = Grid::from_fn(2, shape, |_, _, _, _| {
                let m = r.random_range(0.01..1.0);
                if r.random_bool(0.5) { m } else { -m }
            });
            let up = rand_vec(&mut r, x.len(), -1.0, 1.0);
            let g = relu_backward(&x, &Grid::new(2, shape, up.clone()).unwrap()).unwrap();
            grad_check(
                |p| projected(relu(&Grid::new(2, shape, p[0].clone()).unwrap()).data(), &up),
                &[x.data().to_vec()],
                &[g.data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("relu", reports)
}

pub fn check_resize(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(400 + s);
            let src = rand_shape(&mut r, 1, 4);
            let dst = rand_shape(&mut r, 1, 7);
            let x = rand_grid(&mut r, 2, src, -1.0, 1.0);
            let up = rand_vec(&mut r, 2 * dst.iter().product::<usize>(), -1.0, 1.0);
            let g = trilinear_resize_backward(&Grid::new(2, dst, up.clone()).unwrap(), src);
            grad_check(
                |p| projected(trilinear_resize(&Grid::new(2, src, p[0].clone()).unwrap(), dst).data(), &up),
                &[x.data().to_vec()],
                &[g.data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("trilinear_resize", reports)
}

pub fn check_downsample(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(450 + s);
            let f = r.random_range(1..=3);
            let coarse = rand_shape(&mut r, 1, 3);
            let shape = coarse.map(|c| c * f);
            let x = rand_grid(&mut r, 2, shape, -1.0, 1.0);
            let up = rand_vec(&mut r, 2 * coarse.iter().product::<usize>(), -1.0, 1.0);
            let g = avg_downsample_backward(&Grid::new(2, coarse, up.clone()).unwrap(), f);
            grad_check(
                |p| projected(avg_downsample(&Grid::new(2, shape, p[0].clone()).unwrap(), f).unwrap().data(), &up),
                &[x.data().to_vec()],
                &[g.data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("avg_downsample", reports)
}

pub fn check_crop(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(500 + s);
            let shape = rand_shape(&mut r, 2, 6);
            let size = shape.map(|d| r.random_range(1..=d));
            let origin = [0, 1, 2].map(|i| r.random_range(0..=shape[i] - size[i]));
            let x = rand_grid(&mut r, 2, shape, -1.0, 1.0);
            let up = rand_vec(&mut r, 2 * size.iter().product::<usize>(), -1.0, 1.0);
            let g = crop_patch_backward(&Grid::new(2, size, up.clone()).unwrap(), shape, origin).unwrap();
            grad_check(
                |p| projected(crop_patch(&Grid::new(2, shape, p[0].clone()).unwrap(), origin, size).unwrap().data(), &up),
                &[x.data().to_vec()],
                &[g.data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("crop_patch", reports)
}

pub fn check_concat(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(550 + s);
            let shape = rand_shape(&mut r, 1, 4);
            let (ca, cb) = (r.random_range(1..=3), r.random_range(1..=3));
            let a = rand_grid(&mut r, ca, shape, -1.0, 1.0);
            let b = rand_grid(&mut r, cb, shape, -1.0, 1.0);
            let up = rand_vec(&mut r, a.len() + b.len(), -1.0, 1.0);
            let (ga, gb) = concat_backward(&Grid::new(ca + cb, shape, up.clone()).unwrap(), ca);
            grad_check(
                |p| {
                    let out = concat_channels(&Grid::new(ca, shape, p[0].clone()).unwrap(), &Grid::new(cb, shape, p[1].clone()).unwrap());
                    projected(out.unwrap().data(), &up)
                },
                &[a.data().to_vec(), b.data().to_vec()],
                &[ga.data().to_vec(), gb.data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("concat_channels", reports)
}

pub fn check_upsample_flow(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(580 + s);
            let f = r.random_range(1..=3);
            let coarse = rand_shape(&mut r, 1, 3);
            let fine = coarse.map(|c| c * f);
            let x = rand_grid(&mut r, 3, coarse, -1.0, 1.0);
            let up = rand_vec(&mut r, 3 * fine.iter().product::<usize>(), -1.0, 1.0);
            let g = upsample_flow_backward(&FlowField::new(Grid::new(3, fine, up.clone()).unwrap()).unwrap(), f);
            grad_check(
                |p| {
                    let fl = FlowField::new(Grid::new(3, coarse, p[0].clone()).unwrap()).unwrap();
                    projected(upsample_flow(&fl, f).grid().data(), &up)
                },
                &[x.data().to_vec()],
                &[g.grid().data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("upsample_flow", reports)
}

pub fn check_warp(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(600 + s);
            let shape = rand_shape(&mut r, 2, 5);
            let c = r.random_range(1..=2);
            let vol = rand_grid(&mut r, c, shape, -1.0, 1.0);
            let flow = off_lattice_flow(&mut r, shape);
            let up = rand_vec(&mut r, vol.len(), -1.0, 1.0);
            let g = warp_trilinear_backward(&vol, &flow, [0; 3], &Grid::new(c, shape, up.clone()).unwrap(), true).unwrap();
            grad_check(
                |p| {
                    let v = Grid::new(c, shape, p[0].clone()).unwrap();
                    let f = FlowField::new(Grid::new(3, shape, p[1].clone()).unwrap()).unwrap();
                    projected(warp_trilinear(&v, &f).unwrap().data(), &up)
                },
                &[vol.data().to_vec(), flow.grid().data().to_vec()],
                &[g.volume.data().to_vec(), g.flow.grid().data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("warp_trilinear", reports)
}

pub fn check_losses(instances: usize, opts: &GradCheckOptions) -> Vec<GradSummary> {
    let mut mse = Vec::new();
    let mut ncc = Vec::new();
    let mut smooth = Vec::new();
    let mut dice = Vec::new();
    for s in 0..instances as u64 {
        let mut r = rng(700 + s);
        let shape = rand_shape(&mut r, 2, 5);
        let a = rand_grid(&mut r, 1, shape, 0.0, 1.0);
        let b = rand_grid(&mut r, 1, shape, 0.0, 1.0);
        let g = mse_backward(&a, &b).unwrap();
        mse.push(grad_check(
            |p| mse_loss(&Grid::new(1, shape, p[0].clone()).unwrap(), &b).unwrap(),
            &[a.data().to_vec()],
            &[g.data().to_vec()],
            opts,
        ));

        let window = [3, 5][r.random_range(0..2)];
        let (ga, gb) = ncc_backward(&a, &b, window, LOSS_EPSILON).unwrap();
        ncc.push(grad_check(
            |p| {
                let x = Grid::new(1, shape, p[0].clone()).unwrap();
                let y = Grid::new(1, shape, p[1].clone()).unwrap();
                ncc_loss(&x, &y, window, LOSS_EPSILON).unwrap()
            },
            &[a.data().to_vec(), b.data().to_vec()],
            &[ga.data().to_vec(), gb.data().to_vec()],
            opts,
        ));

        let flow = rand_grid(&mut r, 3, shape, -1.0, 1.0);
        let gs = smoothness_backward(&FlowField::new(flow.clone()).unwrap()).unwrap();
        smooth.push(grad_check(
            |p| smoothness_loss(&FlowField::new(Grid::new(3, shape, p[0].clone()).unwrap()).unwrap()).unwrap(),
            &[flow.data().to_vec()],
            &[gs.grid().data().to_vec()],
            opts,
        ));

        let labels = r.random_range(2..=4);
        let p = rand_grid(&mut r, labels, shape, 0.0, 1.0);
        let q = rand_grid(&mut r, labels, shape, 0.0, 1.0);
        let gd = soft_dice_backward(&p, &q, LOSS_EPSILON).unwrap();
        dice.push(grad_check(
            |x| soft_dice_loss(&Grid::new(labels, shape, x[0].clone()).unwrap(), &q, LOSS_EPSILON).unwrap(),
            &[p.data().to_vec()],
            &[gd.data().to_vec()],
            opts,
        ));
    }
    vec![
        summarize("mse_loss", mse),
        summarize("ncc_loss", ncc),
        summarize("smoothness_loss", smooth),
        summarize("soft_dice_loss", dice),
    ]
}

/// Gradient of the combined objective (similarity, smoothness, overlap) with
/// respect to the flow, alternating MSE and NCC.
pub fn check_total_loss(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let mut r = rng(800 + s);
            let shape = rand_shape(&mut r, 3, 5);
            let fixed = rand_grid(&mut r, 1, shape, 0.0, 1.0);
            let moving = rand_grid(&mut r, 1, shape, 0.0, 1.0);
            let fseg = rand_grid(&mut r, 3, shape, 0.0, 1.0);
            let mseg = rand_grid(&mut r, 3, shape, 0.0, 1.0);
            let flow = off_lattice_flow(&mut r, shape);
            let weights = if s % 2 == 0 {
                LossWeights::default()
            } else {
                LossWeights {
                    ncc_window: 3,
                    ..LossWeights::ncc()
                }
            };
            let out = total_loss(&fixed, &moving, &flow, Some((&fseg, &mseg)), &weights).unwrap();
            grad_check(
                |p| {
                    let f = FlowField::new(Grid::new(3, shape, p[0].clone()).unwrap()).unwrap();
                    total_loss(&fixed, &moving, &f, Some((&fseg, &mseg)), &weights).unwrap().total
                },
                &[flow.grid().data().to_vec()],
                &[out.grad_flow.grid().data().to_vec()],
                opts,
            )
        })
        .collect();
    summarize("total_loss", reports)
}

/// Small architecture used for the end-to-end checks (the default one is
/// exercised separately with fewer sampled parameters).
pub fn small_arch() -> ArchConfig {
    ArchConfig {
        channels: 6,
        hidden: 8,
        fire_rate: 1.0,
        ..ArchConfig::default()
    }
}

/// Model with every parameter (including the zero-initialised ones)
/// perturbed so all paths carry gradient.
pub fn perturbed_model(seed: u64, config: &ArchConfig, scale: f64) -> NcaModel<f64> {
    let mut model = init_model(seed, config).unwrap().cast::<f64>();
    let mut r = rng(seed ^ 0x5eed);
    let mut flat = model.to_flat();
    for v in &mut flat {
        *v += r.random_range(-scale..scale);
    }
    model.set_flat(&flat).unwrap();
    model
}

/// Loss of a full registration (patch mode when `patch` is given) at a
/// deterministic fire rate of 1.
pub fn registration_loss(
    model: &NcaModel<f64>,
    fixed: &Grid<f64>,
    moving: &Grid<f64>,
    patch: Option<Patch>,
    weights: &LossWeights,
) -> f64 {
    let mut r = rng(0);
    let (flow, _, _) = register_pair_traced(fixed, moving, model, &mut r, patch).unwrap();
    let (origin, fixed_region) = match patch {
        Some(p) => (p.origin, crop_patch(fixed, p.origin, p.size).unwrap()),
        None => ([0; 3], fixed.clone()),
    };
    total_loss_region(
        &LossInputs {
            fixed: &fixed_region,
            moving,
            origin,
            fixed_onehot: None,
            moving_onehot: None,
        },
        &flow,
        weights,
    )
    .unwrap()
    .total
}

/// Analytic parameter gradient of [`registration_loss`].
pub fn registration_grad(
    model: &NcaModel<f64>,
    fixed: &Grid<f64>,
    moving: &Grid<f64>,
    patch: Option<Patch>,
    weights: &LossWeights,
) -> Vec<f64> {
    let mut r = rng(0);
    let (flow, _, trace) = register_pair_traced(fixed, moving, model, &mut r, patch).unwrap();
    let (origin, fixed_region) = match patch {
        Some(p) => (p.origin, crop_patch(fixed, p.origin, p.size).unwrap()),
        None => ([0; 3], fixed.clone()),
    };
    let out = total_loss_region(
        &LossInputs {
            fixed: &fixed_region,
            moving,
            origin,
            fixed_onehot: None,
            moving_onehot: None,
        },
        &flow,
        weights,
    )
    .unwrap();
    let grads = register_pair_backward(model, &trace, &out.grad_flow, &[]).unwrap();
    ncamorph::engine::flatten(&grads)
}

/// Smooth 16³ test pair: the moving image is a shifted copy of the fixed one.
pub fn smooth_pair(seed: u64, side: usize) -> (Grid<f64>, Grid<f64>) {
    let mut r = rng(seed);
    let (a, b, c) = (r.random_range(0.2..0.5), r.random_range(0.2..0.5), r.random_range(0.2..0.5));
    let shift = r.random_range(0.5..1.5);
    let f = |z: f64, y: f64, x: f64| 0.5 + 0.25 * (a * x).sin() * (b * y).cos() + 0.2 * (c * z).sin();
    let fixed = Grid::from_fn(1, [side; 3], |_, z, y, x| f(z as f64, y as f64, x as f64));
    let moving = Grid::from_fn(1, [side; 3], |_, z, y, x| f(z as f64, y as f64, x as f64 - shift));
    (fixed, moving)
}

/// Options for whole-pipeline checks: a parameter subsample, and a share
/// of stencils may straddle a ReLU or sampling kink (up to 15%).
pub fn pipeline_check_options() -> GradCheckOptions {
    GradCheckOptions {
        sample_size: 48,
        kink_fraction: 0.15,
        ..GradCheckOptions::default()
    }
}

/// Finite-difference check of the parameter gradient through the whole
/// pipeline (16³, fire rate 1), with and without a finest-level patch.
pub fn check_register_pair(instances: usize, opts: &GradCheckOptions) -> GradSummary {
    let reports = (0..instances as u64)
        .map(|s| {
            let config = small_arch();
            let model = perturbed_model(900 + s, &config, 0.05);
            let (fixed, moving) = smooth_pair(950 + s, 16);
            let patch = (s % 2 == 1).then_some(Patch {
                origin: [2, 4, 6],
                size: [8, 8, 8],
            });
            let weights = LossWeights::default();
            let analytic = registration_grad(&model, &fixed, &moving, patch, &weights);
            let mut probe = model.clone();
            grad_check(
                |p| {
                    probe.set_flat(&p[0]).unwrap();
                    registration_loss(&probe, &fixed, &moving, patch, &weights)
                },
                &[model.to_flat()],
                &[analytic],
                &GradCheckOptions {
                    seed: s,
                    ..opts.clone()
                },
            )
        })
        .collect();
    summarize("register_pair", reports)
}

/// Every primitive plus the full pipeline, `instances` random cases each.
pub fn gradient_suite(instances: usize) -> Vec<GradSummary> {
    let opts = GradCheckOptions::default();
    let pipeline = pipeline_check_options();
    let mut out = vec![
        check_conv(instances, &opts),
        check_dense(instances, &opts),
        check_relu(instances, &opts),
        check_resize(instances, &opts),
        check_downsample(instances, &opts),
        check_crop(instances, &opts),
        check_concat(instances, &opts),
        check_upsample_flow(instances, &opts),
        check_warp(instances, &opts),
    ];
    out.extend(check_losses(instances, &opts));
    out.push(check_total_loss(instances, &opts));
    out.push(check_register_pair(instances, &pipeline));
    out
}

// ---------------------------------------------------------------- oracle and identity runs

/// Largest deviation of one operation from its oracle.
#[derive(Debug)]
pub struct OracleResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// `instances` random cases per operation, all at most 12³.
pub fn oracle_suite(instances: usize) -> Vec<OracleResult> {
    use ncamorph::metrics::ssim3d;
    use ncamorph::warpfield::jacobian_det_map;

    let mut conv = 0.0f64;
    let mut warp = 0.0f64;
    let mut ssim = 0.0f64;
    let mut ncc = 0.0f64;
    let mut jac = 0.0f64;
    for s in 0..instances as u64 {
        let mut r = rng(2000 + s);
        let shape = rand_shape(&mut r, 3, 8);
        let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = [1, 3, 5][r.random_range(0..3)];
        let x = rand_grid(&mut r, ci, shape, -1.0, 1.0);
        let kern =
            ConvKernel3D::new(co, ci, k, rand_vec(&mut r, co * ci * k * k * k, -1.0, 1.0), rand_vec(&mut r, co, -1.0, 1.0))
                .unwrap();
        conv = conv.max(max_abs_diff(conv3d(&x, &kern).unwrap().data(), conv3d_oracle(&x, &kern).data()));

        let vol = rand_grid(&mut r, 2, shape, -1.0, 1.0);
        let flow = FlowField::new(rand_grid(&mut r, 3, shape, -2.5, 2.5)).unwrap();
        warp = warp.max(max_abs_diff(warp_trilinear(&vol, &flow).unwrap().data(), warp_oracle(&vol, &flow).data()));

        let ssim_shape = rand_shape(&mut r, 7, 12);
        let a = rand_grid(&mut r, 1, ssim_shape, 0.0, 1.0);
        let b = Grid::from_fn(1, a.shape(), |_, z, y, x| 0.6 * a.get(0, z, y, x) + r.random_range(0.0..0.4));
        ssim = ssim.max((ssim3d(&a, &b).unwrap() - ssim_oracle(&a, &b, 7)).abs());

        let window = [3, 5, 9][r.random_range(0..3)];
        let p = rand_grid(&mut r, 1, shape, 0.0, 1.0);
        let q = rand_grid(&mut r, 1, shape, 0.0, 1.0);
        ncc = ncc.max((ncc_loss(&p, &q, window, LOSS_EPSILON).unwrap() - ncc_oracle(&p, &q, window)).abs());

        // Smooth random flow: a few low-frequency sinusoids per component.
        let coef = rand_vec(&mut r, 12, -1.0, 1.0);
        let smooth = FlowField::from_fn(shape, |c, z, y, x| {
            let (z, y, x) = (z as f64, y as f64, x as f64);
            coef[4 * c] * (0.3 * x + coef[4 * c + 1]).sin() + coef[4 * c + 2] * (0.25 * y).cos() * (0.2 * z + coef[4 * c + 3]).sin()
        });
        jac = jac.max(max_abs_diff(jacobian_det_map(&smooth).unwrap().data(), jacobian_oracle(&smooth).data()));
    }
    vec![
        OracleResult { name: "conv3d", max_error: conv, tolerance: 1e-6 },
        OracleResult { name: "warp_trilinear", max_error: warp, tolerance: 1e-5 },
        OracleResult { name: "ssim3d", max_error: ssim, tolerance: 1e-6 },
        OracleResult { name: "ncc_loss", max_error: ncc, tolerance: 1e-4 },
        OracleResult { name: "jacobian_det_map", max_error: jac, tolerance: 1e-5 },
    ]
}

/// Exact identities that must hold without tolerance.
pub fn identity_checks() -> Vec<(&'static str, bool)> {
    use ncamorph::engine::register_pair;
    use ncamorph::metrics::{dice_score, ssim3d};
    use ncamorph::warpfield::{count_nonpositive_jacobian, LabelMap};

    let mut r = rng(3000);
    let shape = [16, 20, 12];
    let vol: Grid<f32> = rand_grid(&mut r, 2, shape, -1.0, 1.0).cast();
    let zero = FlowField::<f32>::zeros(shape);
    let warp_identity = warp_trilinear(&vol, &zero).unwrap() == vol;

    let model = init_model(7, &ArchConfig::default()).unwrap();
    let fixed: Grid<f32> = rand_grid(&mut r, 1, [16; 3], 0.0, 1.0).cast();
    let moving: Grid<f32> = rand_grid(&mut r, 1, [16; 3], 0.0, 1.0).cast();
    let (flow, _) = register_pair(&fixed, &moving, &model, &mut r, None).unwrap();
    let untrained_zero = flow.grid().data().iter().all(|&v| v == 0.0)
        && warp_trilinear(&moving, &flow).unwrap() == moving;

    let no_folds = count_nonpositive_jacobian(&zero).unwrap() == 0;

    let labels: Vec<u32> = (0..shape.iter().product::<usize>()).map(|_| r.random_range(0..4)).collect();
    let seg = LabelMap::from_labels(shape, labels).unwrap();
    let dice = dice_score(&seg, &seg).unwrap();
    let dice_one = dice.mean == Some(1.0) && dice.per_label.iter().flatten().all(|&d| d == 1.0);
    let single = vol.select_channels(0, 1);
    let ssim_one = ssim3d(&single, &single).unwrap() == 1.0;
    vec![
        ("zero flow warps bitwise", warp_identity),
        ("untrained model gives zero flow", untrained_zero),
        ("zero flow has no folds", no_folds),
        ("dice of identical labels is 1", dice_one),
        ("ssim of identical volumes is 1", ssim_one),
    ]
}
