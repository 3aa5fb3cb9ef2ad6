//! Finite-difference verification of analytic adjoints (double precision).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Tensors with more elements than this are checked on a random subset
    /// of `sample_size` elements.
    pub max_elements: usize,
    pub sample_size: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    /// Share of checked elements allowed to fall back to `epsilon / 100`
    /// after failing at `epsilon`. Piecewise-linear pipelines (ReLU,
    /// trilinear sampling) put some stencils across a kink; a wrong gradient
    /// still fails at the finer step. Zero disables the fallback.
    pub kink_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-3,
            max_elements: 400,
            sample_size: 256,
            floor: 1e-6,
            seed: 0,
            kink_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements that passed only at the finer step.
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic[t][i]` against central differences of `loss` with
/// respect to `inputs[t][i]`.
pub fn grad_check<F>(
    mut loss: F,
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "one gradient per input tensor");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut kinks = 0;
    for t in 0..inputs.len() {
        assert_eq!(inputs[t].len(), analytic[t].len(), "gradient shape");
        let n = inputs[t].len();
        let indices: Vec<usize> = if n > opts.max_elements {
            sample(&mut rng, n, opts.sample_size.min(n)).into_vec()
        } else {
            (0..n).collect()
        };
        for i in indices {
            let a = analytic[t][i];
            let mut rel_at = |eps: f64| {
                let orig = work[t][i];
                work[t][i] = orig + eps;
                let plus = loss(&work);
                work[t][i] = orig - eps;
                let minus = loss(&work);
                work[t][i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor)
            };
            let mut rel = rel_at(opts.epsilon);
            if opts.kink_fraction > 0.0 && rel >= opts.tolerance {
                let fine = rel_at(opts.epsilon / 100.0);
                if fine < opts.tolerance {
                    kinks += 1;
                    rel = fine;
                }
            }
            checked += 1;
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((t, i));
            }
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        kinks,
        tolerance: opts.tolerance,
        passed: max_rel < opts.tolerance && kinks as f64 <= opts.kink_fraction * checked as f64,
    }
}

/// Directional derivative `J u` of `f` at `x` by central differences.
pub fn central_difference_jvp<F>(mut f: F, x: &[f64], u: &[f64], epsilon: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let plus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + epsilon * b).collect();
    let minus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - epsilon * b).collect();
    f(&plus)
        .iter()
        .zip(f(&minus))
        .map(|(p, m)| (p - m) / (2.0 * epsilon))
        .collect()
}

/// Dot-product test: relative mismatch between `<J u, v>` and `<u, J^T v>`
/// for random `u`, `v`.
pub fn adjoint_mismatch<J, A>(
    mut jvp: J,
    mut vjp: A,
    in_len: usize,
    out_len: usize,
    seed: u64,
) -> f64
where
    J: FnMut(&[f64]) -> Vec<f64>,
    A: FnMut(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..in_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ju = jvp(&u);
    let jtv = vjp(&v);
    assert_eq!(ju.len(), out_len);
    assert_eq!(jtv.len(), in_len);
    let lhs: f64 = ju.iter().zip(&v).map(|(a, b)| a * b).sum();
    let rhs: f64 = u.iter().zip(&jtv).map(|(a, b)| a * b).sum();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12)
}
