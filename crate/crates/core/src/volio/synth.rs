//! Seeded deformable phantoms: smooth labelled blobs plus a known warp.
//!
//! The fixed image samples an analytic anatomy `A` at voxel centres. A smooth
//! displacement `u` (coarse random control grid, trilinearly interpolated)
//! defines `T(p) = p + u(p)`; the moving image samples `A` at `T⁻¹(q)`, so
//! warping the moving image with `u` recovers the fixed one. `T⁻¹` is found by
//! fixed-point iteration, which converges because `u` is scaled to be a
//! contraction (Lipschitz constant < 0.9), and that also keeps `T` fold-free.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Volume;
use crate::error::{Error, Result};
use crate::volgrid::Grid;
use crate::warpfield::{FlowField, LabelMap};

/// Upper bound on the max row sum of `|∇u|`.
const MAX_LIPSCHITZ: f64 = 0.9;
/// Width of the blob boundary ramp relative to the blob radius.
const EDGE_SHARPNESS: f64 = 8.0;
const BACKGROUND: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub shape: [usize; 3],
    pub blobs: usize,
    /// Foreground labels (label 0 is background).
    pub labels: u32,
    /// Standard deviation of the voxel-scale texture that moves with the
    /// anatomy.
    pub noise: f64,
    /// Largest displacement component in voxels (before the fold-free cap).
    pub amplitude: f64,
    /// Control-point spacing of the displacement field, in voxels.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: [48, 48, 48],
            blobs: 4,
            labels: 4,
            noise: 0.02,
            amplitude: 10.0,
            smoothness: 32.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let min_side = *self.shape.iter().min().unwrap();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if min_side < 8 {
            return bad(format!("synthetic volumes need sides >= 8, got {:?}", self.shape));
        }
        if self.blobs == 0 || self.labels == 0 || self.labels > 255 {
            return bad("need at least one blob and 1..=255 labels".into());
        }
        if !(self.amplitude >= 0.0 && self.amplitude < min_side as f64 / 4.0) {
            return bad(format!(
                "amplitude {} must lie in [0, {})",
                self.amplitude,
                min_side as f64 / 4.0
            ));
        }
        if !(self.smoothness > 0.0) || !(self.noise >= 0.0) {
            return bad("smoothness must be > 0 and noise >= 0".into());
        }
        Ok(())
    }
}

/// Generated pair; `flow` warps `moving` onto `fixed`.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub fixed: Volume,
    pub fixed_seg: LabelMap,
    pub moving: Volume,
    pub moving_seg: LabelMap,
    pub flow: FlowField,
}

struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
    label: u32,
    intensity: f64,
}

struct Anatomy {
    blobs: Vec<Blob>,
    /// Voxel-scale texture sampled trilinearly.
    texture: Grid<f64>,
}

fn clamp_index(v: f64, len: usize) -> (usize, usize, f64) {
    let v = v.clamp(0.0, (len - 1) as f64);
    let lo = (v.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, v - lo as f64)
}

/// Trilinear sample of channel `c` at continuous `(z, y, x)`, edge-clamped.
fn sample(grid: &Grid<f64>, c: usize, p: [f64; 3]) -> f64 {
    let [d, h, w] = grid.shape();
    let (z0, z1, fz) = clamp_index(p[0], d);
    let (y0, y1, fy) = clamp_index(p[1], h);
    let (x0, x1, fx) = clamp_index(p[2], w);
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let g = |z, y, x| grid.get(c, z, y, x);
    let a = lerp(g(z0, y0, x0), g(z0, y0, x1), fx);
    let b = lerp(g(z0, y1, x0), g(z0, y1, x1), fx);
    let e = lerp(g(z1, y0, x0), g(z1, y0, x1), fx);
    let f = lerp(g(z1, y1, x0), g(z1, y1, x1), fx);
    lerp(lerp(a, b, fy), lerp(e, f, fy), fz)
}

impl Anatomy {
    fn random<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<Self> {
        let shape = config.shape.map(|s| s as f64);
        let min_side = shape.iter().cloned().fold(f64::INFINITY, f64::min);
        let blobs = (0..config.blobs)
            .map(|i| {
                let label = 1 + (i as u32 % config.labels);
                Blob {
                    centre: shape.map(|s| rng.random_range(0.25..0.75) * (s - 1.0)),
                    radii: [(); 3].map(|_| rng.random_range(0.22..0.32) * min_side),
                    label,
                    intensity: 0.35 + 0.6 * label as f64 / config.labels as f64,
                }
            })
            .collect();
        let normal = Normal::new(0.0, config.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let texture = Grid::from_fn(1, config.shape, |_, _, _, _| normal.sample(rng));
        Ok(Self { blobs, texture })
    }

    /// Intensity (without texture) and label at a continuous point.
    fn eval(&self, p: [f64; 3]) -> (f64, u32) {
        let mut best = (0.0, 0usize);
        for (i, b) in self.blobs.iter().enumerate() {
            let rho = (0..3).map(|a| ((p[a] - b.centre[a]) / b.radii[a]).powi(2)).sum::<f64>().sqrt();
            let m = 1.0 / (1.0 + (-(1.0 - rho) * EDGE_SHARPNESS).exp());
            if m > best.0 {
                best = (m, i);
            }
        }
        let (m, i) = best;
        let blob = &self.blobs[i];
        let value = BACKGROUND + m * (blob.intensity - BACKGROUND);
        (value, if m > 0.5 { blob.label } else { 0 })
    }

    fn image_and_labels(&self, shape: [usize; 3], at: impl Fn(usize, usize, usize) -> [f64; 3]) -> Result<(Volume, LabelMap)> {
        let n = shape.iter().product();
        let mut img = Vec::with_capacity(n);
        let mut lab = Vec::with_capacity(n);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let p = at(z, y, x);
                    let (v, l) = self.eval(p);
                    img.push((v + sample(&self.texture, 0, p)) as f32);
                    lab.push(l);
                }
            }
        }
        let labels = self.blobs.iter().map(|b| b.label).max().unwrap_or(0) + 1;
        Ok((Volume::new(Grid::new(1, shape, img)?), LabelMap::new(shape, lab, labels)?))
    }
}

/// Random displacement on a coarse control grid (channels = `(dz, dy, dx)`
/// in control-grid index space).
struct ControlField {
    spacing: f64,
    nodes: Grid<f64>,
}

impl ControlField {
    fn random<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Self {
        let dims = config.shape.map(|s| ((s - 1) as f64 / config.smoothness).ceil() as usize + 1);
        let mut nodes: Grid<f64> = Grid::from_fn(3, dims, |_, _, _, _| rng.random_range(-1.0..1.0));
        // Peak component becomes `amplitude`.
        let peak = nodes.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            nodes.scale(config.amplitude / peak);
        }
        let mut field = Self {
            spacing: config.smoothness,
            nodes,
        };
        let lip = field.lipschitz();
        if lip > MAX_LIPSCHITZ {
            field.nodes.scale(MAX_LIPSCHITZ / lip);
        }
        field
    }

    /// Bound on the max row sum of the Jacobian of the interpolant: per
    /// component, sum over axes of the largest neighbouring-node difference
    /// divided by the spacing.
    fn lipschitz(&self) -> f64 {
        let shape = self.nodes.shape();
        let mut worst = 0.0f64;
        for c in 0..3 {
            let mut largest = [0.0f64; 3];
            for z in 0..shape[0] {
                for y in 0..shape[1] {
                    for x in 0..shape[2] {
                        let here = [z, y, x];
                        let a = self.nodes.get(c, z, y, x);
                        for axis in 0..3 {
                            if here[axis] + 1 < shape[axis] {
                                let mut n = here;
                                n[axis] += 1;
                                let b = self.nodes.get(c, n[0], n[1], n[2]);
                                largest[axis] = largest[axis].max((a - b).abs());
                            }
                        }
                    }
                }
            }
            worst = worst.max(largest.iter().sum::<f64>() / self.spacing);
        }
        worst
    }

    /// Displacement `(dz, dy, dx)` at a continuous voxel position.
    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        let q = p.map(|v| v / self.spacing);
        [0, 1, 2].map(|c| sample(&self.nodes, c, q))
    }

    /// `T⁻¹(q) - q` by fixed-point iteration.
    fn inverse_at(&self, q: [f64; 3]) -> [f64; 3] {
        let mut psi = [0.0; 3];
        for _ in 0..200 {
            let u = self.at([q[0] + psi[0], q[1] + psi[1], q[2] + psi[2]]);
            let next = u.map(|v| -v);
            let change = (0..3).map(|a| (next[a] - psi[a]).abs()).fold(0.0, f64::max);
            psi = next;
            if change < 1e-9 {
                break;
            }
        }
        psi
    }
}

/// Generates one pair. Draw order: anatomy, texture, then displacement.
pub fn synth_pair<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<SynthPair> {
    config.validate()?;
    let shape = config.shape;
    let anatomy = Anatomy::random(config, rng)?;
    let field = ControlField::random(config, rng);
    let centre = |z: usize, y: usize, x: usize| [z as f64, y as f64, x as f64];
    let (fixed, fixed_seg) = anatomy.image_and_labels(shape, centre)?;
    let (moving, moving_seg) = anatomy.image_and_labels(shape, |z, y, x| {
        let q = centre(z, y, x);
        let psi = field.inverse_at(q);
        [q[0] + psi[0], q[1] + psi[1], q[2] + psi[2]]
    })?;
    // Stored as (dx, dy, dz) channels.
    let flow = FlowField::from_fn(shape, |c, z, y, x| field.at(centre(z, y, x))[2 - c] as f32);
    Ok(SynthPair {
        fixed,
        fixed_seg,
        moving,
        moving_seg,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice_score;
    use crate::warpfield::{count_nonpositive_jacobian, warp_nearest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SynthConfig {
        SynthConfig {
            shape: [24, 24, 24],
            amplitude: 3.0,
            smoothness: 8.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_amplitude_gives_identical_pair() {
        let cfg = SynthConfig {
            amplitude: 0.0,
            ..small()
        };
        let p = synth_pair(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.fixed, p.moving);
        assert_eq!(p.fixed_seg, p.moving_seg);
        assert_eq!(p.flow.max_abs(), 0.0);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = synth_pair(&small(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_pair(&small(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.flow, b.flow);
    }

    #[test]
    fn ground_truth_flow_is_fold_free_and_recovers_labels() {
        for seed in 0..3 {
            let p = synth_pair(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(count_nonpositive_jacobian(&p.flow).unwrap(), 0);
            let recovered = warp_nearest(&p.moving_seg, &p.flow).unwrap();
            let dice = dice_score(&p.fixed_seg, &recovered).unwrap().mean.unwrap();
            assert!(dice >= 0.95, "seed {seed}: {dice}");
            let base = dice_score(&p.fixed_seg, &p.moving_seg).unwrap().mean.unwrap();
            assert!(base < dice, "seed {seed}: {base} vs {dice}");
        }
    }

    #[test]
    fn rejects_large_amplitude() {
        let cfg = SynthConfig {
            amplitude: 6.0,
            ..small()
        };
        assert!(synth_pair(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
